from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gsinpaint import io


def test_png_roundtrip_is_exact_on_8bit_values(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(7, 9, 3)) / 255.0
    io.write_png(tmp_path / "a.png", img)
    assert np.array_equal(io.read_png_rgb(tmp_path / "a.png"), img)


def test_png_quantizes_to_nearest_level(tmp_path):
    img = np.full((2, 2, 3), 0.5)
    io.write_png(tmp_path / "a.png", img)
    assert np.all(io.read_png_rgb(tmp_path / "a.png") == 128 / 255)


def test_mask_png_is_0_or_255(tmp_path):
    m = np.zeros((5, 6), bool)
    m[1:3, 2:5] = True
    io.write_mask_png(tmp_path / "m.png", m)
    raw = io.read_png_gray(tmp_path / "m.png")
    assert set(np.unique(raw)) == {0, 255}
    assert np.array_equal(io.read_mask_png(tmp_path / "m.png"), m)


def test_missing_png_names_the_file(tmp_path):
    with pytest.raises(io.FormatError, match="nope.png not found"):
        io.read_png_rgb(tmp_path / "nope.png")


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(0.015625, 1e4, width=32)))
def test_pfm_roundtrip_property(tmp_path_factory, depth):
    path = tmp_path_factory.mktemp("pfm") / "d.pfm"
    io.write_pfm(path, depth)
    assert np.array_equal(io.read_pfm(path), depth.astype(np.float64))


def test_pfm_sentinel_written_as_zero(tmp_path):
    d = np.array([[1.5, -1.0], [2.0, 3.25]])
    io.write_pfm(tmp_path / "d.pfm", d)
    raw = io.read_pfm(tmp_path / "d.pfm", sentinel=None)
    assert raw[0, 1] == 0.0
    assert np.array_equal(io.read_pfm(tmp_path / "d.pfm"), d)


def test_pfm_rgb_and_row_order(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    io.write_pfm(tmp_path / "c.pfm", img)
    assert np.array_equal(io.read_pfm(tmp_path / "c.pfm"), img)
    # PFM stores the bottom row first
    body = (tmp_path / "c.pfm").read_bytes().split(b"-1.0\n", 1)[1]
    assert np.frombuffer(body, "<f4")[0] == img[1, 0, 0]


def test_pfm_truncated(tmp_path):
    io.write_pfm(tmp_path / "d.pfm", np.ones((4, 4)))
    data = (tmp_path / "d.pfm").read_bytes()
    (tmp_path / "d.pfm").write_bytes(data[:-5])
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_pfm(tmp_path / "d.pfm")


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, size=(20, 3)) / 255.0
    io.write_ply(tmp_path / "p.ply", pts, cols)
    p2, c2 = io.read_ply(tmp_path / "p.ply")
    assert np.allclose(p2, pts, rtol=1e-6, atol=1e-7)
    assert np.array_equal(c2, cols)
    head = (tmp_path / "p.ply").read_text().splitlines()[:3]
    assert head == ["ply", "format ascii 1.0", "element vertex 20"]


def test_gsip_header_layout(tmp_path):
    table = np.arange(60, dtype=np.float32).reshape(2, 30)
    io.write_gsip(tmp_path / "g.gsip", table)
    raw = (tmp_path / "g.gsip").read_bytes()
    assert raw[:4] == b"GSIP"
    assert struct.unpack("<IQ", raw[4:16]) == (io.GSIP_VERSION, 2)
    assert len(raw) == 16 + 2 * 30 * 4
    assert np.array_equal(io.read_gsip(tmp_path / "g.gsip"), table)


def test_gsip_version_mismatch(tmp_path):
    io.write_gsip(tmp_path / "g.gsip", np.zeros((1, 30)))
    raw = bytearray((tmp_path / "g.gsip").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "g.gsip").write_bytes(bytes(raw))
    with pytest.raises(io.FormatError, match="version 99"):
        io.read_gsip(tmp_path / "g.gsip")


def test_gsip_truncated_mid_record(tmp_path):
    io.write_gsip(tmp_path / "g.gsip", np.ones((3, 30)))
    raw = (tmp_path / "g.gsip").read_bytes()
    (tmp_path / "g.gsip").write_bytes(raw[:16 + 30 * 4 + 17])
    with pytest.raises(io.FormatError):
        io.read_gsip(tmp_path / "g.gsip")


def test_gsip_bad_magic(tmp_path):
    (tmp_path / "g.gsip").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(io.FormatError, match="magic"):
        io.read_gsip(tmp_path / "g.gsip")
