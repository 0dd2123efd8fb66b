from __future__ import annotations

import sys
import textwrap

import numpy as np
import pytest
from scipy import ndimage

from gsinpaint import inpaint as ip
from gsinpaint.inpaint import InpaintError, InpaintRequest, diffuse_fill

import oracles


def _request(h=16, w=16, seed=0, hole=(slice(5, 10), slice(4, 12))):
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), bool)
    mask[hole] = True
    return InpaintRequest(rng.uniform(size=(h, w, 3)), rng.uniform(1, 3, size=(h, w)), mask)


@pytest.mark.parametrize("backend", ["constant", "diffuse", "oracle"])
def test_empty_mask_returns_input(backend):
    req = _request(hole=(slice(0, 0), slice(0, 0)))
    res = ip.inpaint(req, backend)
    assert np.array_equal(res.image, req.image) and np.array_equal(res.depth, req.depth)


def test_constant_backend():
    req = _request()
    res = ip.inpaint(req, "constant", fill_value=0.5)
    assert np.all(res.image[req.mask] == 0.5)
    assert np.array_equal(res.image[~req.mask], req.image[~req.mask])
    ring = ndimage.binary_dilation(req.mask, structure=ndimage.generate_binary_structure(2, 1)) & ~req.mask
    assert np.allclose(res.depth[req.mask], req.depth[ring].mean())


def test_diffuse_uniform_gray_stays_gray():
    req = InpaintRequest(np.full((12, 12, 3), 0.37), np.full((12, 12), 2.0), _request(12, 12).mask)
    res = ip.inpaint(req, "diffuse")
    assert np.allclose(res.image, 0.37, atol=1e-6)
    assert np.allclose(res.depth, 2.0, atol=1e-6)


def test_single_pixel_hole_is_neighbour_mean():
    img = np.zeros((3, 3))
    img[0, 1], img[1, 0], img[1, 2], img[2, 1] = 0.2, 0.4, 0.6, 0.8
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    assert abs(diffuse_fill(img, mask)[1, 1] - 0.5) < 1e-12


def test_fully_masked_falls_back():
    out = diffuse_fill(np.random.default_rng(0).uniform(size=(5, 5)), np.ones((5, 5), bool))
    assert np.all(out == 0.5)


def test_ramp_matches_dense_harmonic_solve():
    y, x = np.mgrid[0:16, 0:16]
    ramp = 0.1 + 0.05 * x + 0.02 * y
    mask = np.zeros((16, 16), bool)
    mask[4:12, 3:13] = True
    mask[2, 2] = True
    out = diffuse_fill(ramp, mask, tolerance=1e-10, iterations=100000)
    assert np.max(np.abs(out - oracles.harmonic_fill_dense(ramp, mask))) < 1e-6
    assert np.max(np.abs(out - ramp)) < 1e-3


def test_random_boundary_matches_dense_solve():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(16, 16))
    mask = rng.uniform(size=(16, 16)) < 0.3
    mask[0, :] = False  # keep every component anchored
    out = diffuse_fill(img, mask, tolerance=1e-11, iterations=100000)
    assert np.max(np.abs(out - oracles.harmonic_fill_dense(img, mask))) < 1e-6


def test_maximum_principle_per_component():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(24, 24))
    mask = np.zeros((24, 24), bool)
    mask[3:9, 3:9] = True
    mask[14:20, 10:22] = True
    out = diffuse_fill(img, mask)
    four = ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(mask, structure=four)
    for c in range(1, n + 1):
        comp = labels == c
        ring = ndimage.binary_dilation(comp, structure=four) & ~mask
        assert out[comp].min() >= img[ring].min() - 1e-12
        assert out[comp].max() <= img[ring].max() + 1e-12


def test_diffuse_is_deterministic():
    req = _request(seed=5)
    a, b = ip.inpaint(req, "diffuse"), ip.inpaint(req, "diffuse")
    assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)


def test_depth_positive_inside_mask_even_from_sentinel():
    req = _request()
    depth = req.depth.copy()
    depth[req.mask] = -1.0
    depth[4:11, 3:13] = -1.0  # sentinel also around the hole
    res = ip.inpaint(InpaintRequest(req.image, depth, req.mask), "diffuse")
    assert np.all(res.depth[req.mask] > 0)


def test_oracle_copies_ground_truth():
    req = _request()
    rng = np.random.default_rng(9)
    truth = (rng.uniform(size=req.image.shape), rng.uniform(1, 2, size=req.depth.shape))
    res = ip.inpaint(req, "oracle", truth=truth)
    assert np.array_equal(res.image[req.mask], truth[0][req.mask])
    assert np.array_equal(res.depth[req.mask], truth[1][req.mask])
    assert np.array_equal(res.image[~req.mask], req.image[~req.mask])


def test_oracle_without_truth():
    with pytest.raises(InpaintError, match="ground-truth"):
        ip.inpaint(_request(), "oracle")


def test_unknown_backend():
    with pytest.raises(InpaintError, match="unknown inpainter"):
        ip.inpaint(_request(), "lama")


def test_mismatched_request_shapes():
    with pytest.raises(InpaintError, match="disagree"):
        InpaintRequest(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4), bool))


def _script(tmp_path, body):
    path = tmp_path / "tool.py"
    path.write_text(textwrap.dedent(body))
    return f"{sys.executable} {path}"


ECHO = """
    import shutil
    shutil.copy("in_rgb.png", "out_rgb.png")
    shutil.copy("in_depth.pfm", "out_depth.pfm")
"""

SCRIBBLE = """
    from PIL import Image
    import numpy as np, shutil
    img = np.array(Image.open("in_rgb.png"))
    img[:, :3] = 0  # outside the mask
    Image.fromarray(img).save("out_rgb.png")
    shutil.copy("in_depth.pfm", "out_depth.pfm")
"""


def _quantized_request():
    req = _request()
    img = np.round(req.image * 255) / 255
    depth = req.depth.astype(np.float32).astype(np.float64)
    return InpaintRequest(img, depth, req.mask)


def test_external_echo_returns_input(tmp_path):
    req = _quantized_request()
    res = ip.inpaint(req, "external", exchange_dir=tmp_path / "x", command=_script(tmp_path, ECHO), timeout=30)
    assert np.array_equal(res.image, req.image)
    assert np.array_equal(res.depth, req.depth)
    assert res.restored == 0
    for name in ip.EXCHANGE_INPUTS:
        assert (tmp_path / "x" / name).exists()


def test_external_edits_outside_are_restored(tmp_path):
    req = _quantized_request()
    res = ip.inpaint(req, "external", exchange_dir=tmp_path / "x", command=_script(tmp_path, SCRIBBLE),
                     timeout=30)
    assert res.restored > 0
    assert np.array_equal(res.image[~req.mask], req.image[~req.mask])


def test_external_timeout_keeps_exchange_files(tmp_path):
    with pytest.raises(InpaintError, match="timed out"):
        ip.inpaint(_quantized_request(), "external", exchange_dir=tmp_path / "x", timeout=0.2)
    assert (tmp_path / "x" / "in_mask.png").exists()


def test_external_failure_reports_status(tmp_path):
    cmd = _script(tmp_path, "raise SystemExit(3)\n")
    with pytest.raises(InpaintError, match="status 3"):
        ip.inpaint(_quantized_request(), "external", exchange_dir=tmp_path / "x", command=cmd, timeout=30)
