"""Acceptance criteria, one test each, with a PASS/FAIL summary line per criterion.

Run just these with ``pytest tests/test_acceptance.py -v``. The end-to-end pair
(criteria 6 and 7) drives the installed ``gsinpaint`` command and takes several minutes.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import time

import numpy as np
import pytest

from gsinpaint import losses, masks
from gsinpaint.geometry import backproject_pixel, project_points
from gsinpaint.render import render
from gsinpaint.scene import Dataset
from gsinpaint.synth import SceneSpec, fixture_spec, generate, oracle_refined_masks

import gradcheck
import oracles
from conftest import ACCEPTANCE, axis_pose, random_gaussians, random_pose

# regression constants for the oracle end-to-end run; measured 34.3 dB masked (worst view)
# and 59.5 dB unmasked through the command line
E2E_MASKED_PSNR = 24.0
E2E_UNMASKED_PSNR = 40.0
E2E_BUDGET = 15 * 60


def _report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


class _Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# ---------------------------------------------------------------------------
# 1. projection round trip
# ---------------------------------------------------------------------------

def test_c1_projection_round_trip():
    rng = np.random.default_rng(100)
    worst_uv = worst_z = 0.0
    exact = True
    with _Timer() as t:
        for _ in range(10_000):
            pose = random_pose(rng, width=int(rng.integers(16, 257)), height=int(rng.integers(16, 257)))
            u, v = int(rng.integers(0, pose.width)), int(rng.integers(0, pose.height))
            z = rng.uniform(0.05, 50.0)
            pu, pv, pz = project_points(backproject_pixel(u, v, z, pose), pose)
            worst_uv = max(worst_uv, abs(pu[0] - u), abs(pv[0] - v))
            worst_z = max(worst_z, abs(pz[0] - z))
            exact &= (math.floor(pu[0] + 0.5), math.floor(pv[0] + 0.5)) == (u, v)
    ok = exact and worst_uv < 1e-6 and worst_z < 1e-6 and t.seconds < 5
    _report(1, ok, f"pixel exact={exact} max|duv|={worst_uv:.1e} max|dz|={worst_z:.1e} {t.seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. renderer against brute-force compositing
# ---------------------------------------------------------------------------

def test_c2_renderer_matches_brute_force():
    rng = np.random.default_rng(200)
    worst = 0.0
    with _Timer() as t:
        for _ in range(20):
            g = random_gaussians(rng, int(rng.integers(1, 51)))
            pose = random_pose(rng, 64, 64)
            rv = render(g, pose, identity=False)
            rgb, depth, cov = oracles.brute_force_render_dense(g, pose)
            assert np.array_equal(rv.depth < 0, depth < 0)
            ok = depth > 0
            worst = max(worst, np.abs(rv.rgb - rgb).max(), np.abs(rv.coverage - cov).max(),
                        np.abs(rv.depth[ok] - depth[ok]).max(initial=0.0))
    passed = worst < 1e-5 and t.seconds < 30
    _report(2, passed, f"max abs error {worst:.1e} over 20 scenes, {t.seconds:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 3. gradients through the renderer
# ---------------------------------------------------------------------------

def _grad_scene(seed: int, n: int = 12):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, n, spread=0.4)
    g = gradcheck.with_backdrop(g.with_(positions=g.positions + [0, 0, 3.0]))
    return rng, g, axis_pose(20, 20, fx=20.0)


def test_c3_gradients_through_renderer():
    steps = {**dict.fromkeys(gradcheck.FIELDS, 1e-6), "identities": 1e-4}
    errors = {}
    with _Timer() as t:
        rng, g, pose = _grad_scene(300)
        target = rng.uniform(size=(20, 20, 3))
        target_depth = rng.uniform(2.5, 6.5, size=(20, 20))
        labels = rng.integers(0, 16, size=(20, 20))

        def rgb(view):
            value, grad = losses.l_rgb_with_grad(view.rgb, target)
            return value, grad, None, None

        def depth(view):
            value, grad = losses.l_depth_with_grad(view.depth, target_depth)
            return value, None, grad, None

        def identity(view):
            value, grad = losses.identity_ce_with_grad(view.identity, labels)
            return value, None, None, grad

        def cross(view):
            value, grads = losses.l_cross_with_grad([view.rgb], [target])
            return value, grads[0], None, None

        errors["rgb"] = gradcheck.check(g, pose, rgb, step=steps)
        errors["depth"] = gradcheck.check(g, pose, depth, step=steps)
        errors["identity"] = gradcheck.check(g, pose, identity, identity=True, step=steps)
        errors["cross"] = gradcheck.check(g, pose, cross, step=steps)
    worst = {k: max(v.values()) for k, v in errors.items()}
    ok = (max(worst["rgb"], worst["depth"], worst["identity"]) < 1e-4 and worst["cross"] < 1e-3
          and t.seconds < 120)
    _report(3, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" {t.seconds:.1f}s")
    assert ok, errors


# ---------------------------------------------------------------------------
# 4. mask inference against the visibility oracle
# ---------------------------------------------------------------------------

def _random_spec(rng, seed: int) -> SceneSpec:
    return SceneSpec(width=48, height=48, floor_gaussians=1200, object_gaussians=300, seed=seed,
                     num_views=int(rng.integers(2, 7)), elevation=float(rng.uniform(35, 70)),
                     azimuth_offset=float(rng.uniform(0, 360)), object_yaw=float(rng.uniform(0, 90)),
                     object_center=tuple(rng.uniform(-0.4, 0.4, size=2)),
                     object_shape=str(rng.choice(["box", "sphere", "composite"])),
                     rig=str(rng.choice(["ring", "arc"])))


def _depths(scene):
    return [render(scene.gaussians, v.pose, identity=False).depth for v in scene.dataset.views]


def test_c4_masks_match_oracle():
    with _Timer() as t:
        scene = generate(fixture_spec("ring8_masks"))
        ms = masks.refine_all(scene.dataset, _depths(scene))
        oracle = oracle_refined_masks(scene.dataset, scene.removed)
        agreement = [float((ms.unopened[i] == oracle[i])[m].mean()) for i, m in enumerate(ms.original)]
        subset = all(not (r & ~m).any() for r, m in zip(ms.refined, ms.original))
        rng = np.random.default_rng(400)
        for seed in range(20):
            s = generate(_random_spec(rng, seed))
            rs = masks.refine_all(s.dataset, _depths(s))
            subset &= all(not (r & ~m).any() for f in (rs.refined, rs.unopened) for r, m in zip(f, rs.original))
    ok = min(agreement) >= 0.99 and subset and t.seconds < 60
    _report(4, ok, f"min agreement {min(agreement):.4f} subset={subset} {t.seconds:.1f}s")
    assert ok, agreement


# ---------------------------------------------------------------------------
# 5. determinism and view-order invariance
# ---------------------------------------------------------------------------

def test_c5_refine_all_deterministic_and_order_invariant(ring8):
    ds = ring8.dataset
    with _Timer() as t:
        depths = _depths(ring8)
        a = masks.refine_all(ds, depths)
        b = masks.refine_all(ds, depths)
        same = all(np.array_equal(x, y) for f in ("refined", "unopened", "backgrounds")
                   for x, y in zip(getattr(a, f), getattr(b, f)))
        invariant = True
        for perm in (np.arange(len(ds))[::-1], np.random.default_rng(500).permutation(len(ds))):
            p = masks.refine_all(Dataset(tuple(ds.views[k] for k in perm)), [depths[k] for k in perm])
            invariant &= all(np.array_equal(getattr(p, f)[i], getattr(a, f)[k])
                             for f in ("refined", "unopened", "backgrounds") for i, k in enumerate(perm))
    ok = same and invariant and t.seconds < 60
    _report(5, ok, f"bit-identical={same} permutation-invariant={invariant} {t.seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 7. end to end through the command line
# ---------------------------------------------------------------------------

def _gsinpaint(*args):
    done = subprocess.run(["gsinpaint", *map(str, args)], capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    return done


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    _gsinpaint("synth", "--fixture", "ring8", "--out", root / "data")
    for backend in ("oracle", "diffuse"):
        _gsinpaint("pipeline", "--data", root / "data", "--out", root / backend, "--init",
                   root / "data/scene_gt.gsip", "--fit-iterations", 0, "--inpainter", backend)
    return root, time.perf_counter() - start


@pytest.mark.slow
def test_c6_end_to_end_with_oracle_inpainter(e2e):
    root, seconds = e2e
    report = json.loads((root / "oracle/eval/eval_report.json").read_text())
    assert len(report["views"]) == 4  # the held-out ring views
    masked, unmasked = report["min"]["masked_psnr"], report["min"]["unmasked_psnr"]
    ok = masked >= E2E_MASKED_PSNR and unmasked >= E2E_UNMASKED_PSNR and seconds < E2E_BUDGET
    _report(6, ok, f"worst held-out view: masked {masked:.1f} dB, unmasked {unmasked:.1f} dB; "
                   f"criteria 6+7 took {seconds / 60:.1f} min")
    assert ok


def _metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_c7_cross_view_loss_halves(e2e):
    # targets are rebuilt at every re-inpaint, so both ends are scored against the ones in
    # force at the last iteration; the iteration-0 targets are reported alongside
    root, _ = e2e
    rows = _metrics(root / "diffuse/refine/metrics.csv")
    first, last = rows[0], rows[-1]
    assert int(last["iteration"]) == 5000
    start, end = float(first["cross_last_targets"]), float(last["cross_last_targets"])
    early = float(last["cross_frozen"]) / float(first["cross_frozen"])
    ok = end <= 0.5 * start
    _report(7, ok, f"cross-view loss on final targets {start:.4f} -> {end:.4f} ({end / start:.1%} of start); "
                   f"on iteration-0 targets {early:.0%}")
    assert ok


# ---------------------------------------------------------------------------
# 8. loss identities
# ---------------------------------------------------------------------------

def test_c8_loss_identities():
    rng = np.random.default_rng(800)
    img = rng.uniform(size=(32, 32, 3))
    depth = rng.uniform(1, 3, size=(32, 32))
    with _Timer() as t:
        zeros = {
            "image": losses.l_image(img, img),
            "image_3dgs": losses.l_image(img, img, variant="3dgs"),
            "rgb": losses.l_rgb_with_grad(img, img)[0],
            "depth": losses.l_depth_with_grad(depth, depth)[0],
            "cross": losses.l_cross([img, img[::-1]], [img, img[::-1]]),
        }
        ssim_err = abs(losses.ssim(img, img) - 1.0)
        ce_err = abs(losses.identity_ce_with_grad(np.zeros((8, 8, 16)), rng.integers(0, 16, (8, 8)))[0]
                     - math.log(16))
    worst_zero = max(abs(v) for v in zeros.values())
    ok = worst_zero < 1e-12 and ssim_err < 1e-12 and ce_err < 1e-9 and t.seconds < 5
    _report(8, ok, f"max loss on identical inputs {worst_zero:.1e}, |SSIM-1|={ssim_err:.1e}, "
                   f"|CE-ln16|={ce_err:.1e} {t.seconds:.2f}s")
    assert ok, zeros
