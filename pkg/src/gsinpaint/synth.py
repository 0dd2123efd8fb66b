"""Synthetic scenes with a removable object, paired ground truth and brute-force oracles.

A scene is a textured floor (plus optional walls) and one object (box, sphere or a
box with a sphere on top). ``generate`` renders it twice, with and without the
object, so every view carries its ground-truth object-removed image and depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .geometry import backproject, project_points
from .losses import ssim_map
from .render import render, render_labels
from .scene import (BACKGROUND_LABEL, NUM_IDENTITY, CameraPose, ColoredPointCloud, Dataset, Gaussians,
                    View, rotmat_to_quat, save_dataset, save_gaussians)

WALL_LABEL = 1
IDENTITY_SCALE = 8.0
PSNR_CAP = 99.0


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a synthetic scene. Lengths are in scene units."""

    room_size: float = 4.0  # floor is [-room/2, room/2]^2 at z = 0
    wall_height: float = 0.0  # 0 disables the walls
    floor_seed: int = 11
    wall_seed: int = 12
    object_seed: int = 13
    texture_cell: float = 0.5
    object_shape: str = "box"  # box | sphere | composite
    object_center: tuple[float, float] = (0.0, 0.0)
    object_size: tuple[float, float, float] = (0.8, 0.8, 0.8)
    object_yaw: float = 20.0  # degrees
    object_label: int = 3
    floor_gaussians: int = 4000
    wall_gaussians: int = 0  # per wall
    object_gaussians: int = 1000
    rig: str = "ring"  # ring | arc
    num_views: int = 8
    rig_radius: float = 3.0
    elevation: float = 60.0  # degrees above the floor
    arc_span: float = 120.0  # degrees, arc rig only
    azimuth_offset: float = 0.0  # degrees
    fov: float = 55.0  # horizontal, degrees
    width: int = 64
    height: int = 64
    holdout_views: int = 0  # extra views between the rig views, written to test/
    mask_threshold: float = 1.0 / 255.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if not 0 <= self.object_label < NUM_IDENTITY:
            raise ValueError(f"object_label must lie in [0, {NUM_IDENTITY})")
        if self.object_label in (BACKGROUND_LABEL, WALL_LABEL):
            raise ValueError("object_label collides with the floor or wall label")
        if self.object_shape not in ("box", "sphere", "composite"):
            raise ValueError(f"unknown object shape {self.object_shape!r}")
        if self.rig not in ("ring", "arc"):
            raise ValueError(f"unknown rig {self.rig!r}")
        half = self.room_size / 2
        cx, cy = self.object_center
        reach = 0.5 * math.hypot(self.object_size[0], self.object_size[1])
        if abs(cx) + reach > half or abs(cy) + reach > half:
            raise ValueError("object does not fit inside the room")
        if min(self.floor_gaussians, self.wall_gaussians, self.object_gaussians) < 0:
            raise ValueError("Gaussian counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("object_center", "object_size"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_(self, **changes) -> "SceneSpec":
        return SceneSpec.from_dict({**self.to_dict(), **changes})


@dataclass(frozen=True)
class SynthScene:
    spec: SceneSpec
    gaussians: Gaussians  # ground truth with the object
    removed: Gaussians  # ground truth without the object
    object_index: np.ndarray  # indices of the object's Gaussians in ``gaussians``
    dataset: Dataset
    holdout: Dataset | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def fixture_spec(name: str = "ring8") -> SceneSpec:
    """Named scenes used by the test-suite and the README walkthrough."""
    if name == "ring8":
        return SceneSpec(holdout_views=4)
    if name == "ring8_masks":
        # higher resolution so pixel discretization stays well under 1% of each mask
        return SceneSpec(width=192, height=192)
    if name == "pair90":
        return SceneSpec(num_views=2, rig="arc", arc_span=90.0, floor_gaussians=2500,
                         object_gaussians=600, azimuth_offset=-45.0)
    if name == "small":
        return SceneSpec(width=48, height=48, floor_gaussians=1500, object_gaussians=400, num_views=4)
    raise KeyError(f"unknown fixture {name!r}")


# ---------------------------------------------------------------------------
# textures and surfaces
# ---------------------------------------------------------------------------

def value_noise(uv: np.ndarray, seed: int, cell: float, extent: float, octaves: int = 2) -> np.ndarray:
    """Smoothly interpolated lattice noise, RGB in [0, 1], for 2D surface coordinates."""
    rng = np.random.default_rng(seed)
    out = np.zeros((len(uv), 3))
    amp_total = 0.0
    amp = 1.0
    for _ in range(octaves):
        n = int(math.ceil(2 * extent / cell)) + 3
        lattice = rng.random((n, n, 3))
        t = (uv + extent) / cell
        i = np.clip(np.floor(t).astype(np.int64), 0, n - 2)
        f = t - i
        f = f * f * (3 - 2 * f)
        a = lattice[i[:, 0], i[:, 1]]
        b = lattice[i[:, 0] + 1, i[:, 1]]
        c = lattice[i[:, 0], i[:, 1] + 1]
        d = lattice[i[:, 0] + 1, i[:, 1] + 1]
        fx, fy = f[:, :1], f[:, 1:]
        out += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy)
        amp_total += amp
        amp *= 0.5
        cell *= 0.5
    return out / amp_total


def _texture(uv, seed, spec: SceneSpec, base) -> np.ndarray:
    noise = value_noise(uv, seed, spec.texture_cell, spec.room_size + max(spec.object_size) + 1.0)
    return np.clip(np.asarray(base) + 0.7 * (noise - 0.5), 0.03, 0.97)


def _frame_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation takes the local z axis to ``normal``."""
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return rotmat_to_quat(np.stack([t1, t2, n], axis=1))


def _jittered_grid(rng, size_a: float, size_b: float, count: int):
    """Stratified samples on [0,a]x[0,b]; returns (points (n,2), cell spacing)."""
    if count <= 0:
        return np.zeros((0, 2)), 1.0
    na = max(1, int(round(math.sqrt(count * size_a / size_b))))
    nb = max(1, int(round(count / na)))
    da, db = size_a / na, size_b / nb
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    pts = np.stack([(ia.ravel() + 0.5) * da, (ib.ravel() + 0.5) * db], axis=1)
    pts += rng.uniform(-0.3, 0.3, size=pts.shape) * [da, db]
    return pts, max(da, db)


def _surface(rng, origin, axis_a, axis_b, size_a, size_b, count, label, tex_seed, base, spec,
             uv_offset=(0.0, 0.0), opacity=0.95, thickness=0.15) -> Gaussians:
    """Flat Gaussians tiling a rectangle spanned by two orthogonal unit axes."""
    uv, spacing = _jittered_grid(rng, size_a, size_b, count)
    n = len(uv)
    if n == 0:
        return Gaussians.empty()
    axis_a, axis_b = np.asarray(axis_a, float), np.asarray(axis_b, float)
    normal = np.cross(axis_a, axis_b)
    pos = np.asarray(origin, float) + uv[:, :1] * axis_a + uv[:, 1:] * axis_b
    sigma = 0.6 * spacing
    rot = rotmat_to_quat(np.stack([axis_a, axis_b, normal / np.linalg.norm(normal)], axis=1))
    ident = np.zeros((n, NUM_IDENTITY))
    ident[:, label] = IDENTITY_SCALE
    return Gaussians(
        positions=pos,
        scales=np.tile([sigma, sigma, thickness * sigma], (n, 1)),
        rotations=np.tile(rot, (n, 1)),
        opacities=np.full(n, opacity),
        colors=_texture(uv + np.asarray(uv_offset), tex_seed, spec, base),
        identities=ident,
    )


def _floor(rng, spec: SceneSpec) -> Gaussians:
    half = spec.room_size / 2
    return _surface(rng, (-half, -half, 0.0), (1, 0, 0), (0, 1, 0), spec.room_size, spec.room_size,
                    spec.floor_gaussians, BACKGROUND_LABEL, spec.floor_seed, (0.55, 0.45, 0.35), spec,
                    uv_offset=(-half, -half))


def _walls(rng, spec: SceneSpec) -> Gaussians:
    if spec.wall_height <= 0 or spec.wall_gaussians == 0:
        return Gaussians.empty()
    half, h, s = spec.room_size / 2, spec.wall_height, spec.room_size
    parts = []
    # each wall is spanned so that its normal points into the room
    for k, (origin, a) in enumerate([((-half, -half, 0), (1, 0, 0)), ((half, -half, 0), (0, 1, 0)),
                                     ((half, half, 0), (-1, 0, 0)), ((-half, half, 0), (0, -1, 0))]):
        parts.append(_surface(rng, origin, a, (0, 0, 1), s, h, spec.wall_gaussians, WALL_LABEL,
                              spec.wall_seed, (0.45, 0.55, 0.6), spec, uv_offset=(k * s, 0.0)))
    return Gaussians.concat(parts)


def _box(rng, spec: SceneSpec, center, size, count, seed) -> Gaussians:
    sx, sy, sz = size
    yaw = math.radians(spec.object_yaw)
    ex = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    ey = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    c = np.asarray(center, float)  # center of the bottom face
    faces = [  # origin corner, axis a, axis b, extents; a x b points outward
        (c - ex * sx / 2 - ey * sy / 2 + ez * sz, ex, ey, sx, sy),
        (c - ex * sx / 2 - ey * sy / 2, ex, ez, sx, sz),
        (c + ex * sx / 2 - ey * sy / 2, ey, ez, sy, sz),
        (c + ex * sx / 2 + ey * sy / 2, -ex, ez, sx, sz),
        (c - ex * sx / 2 + ey * sy / 2, -ey, ez, sy, sz),
    ]
    areas = np.array([f[3] * f[4] for f in faces])
    counts = np.floor(count * areas / areas.sum()).astype(int)
    counts[0] += count - counts.sum()
    parts = []
    for k, ((o, a, b, la, lb), n) in enumerate(zip(faces, counts)):
        parts.append(_surface(rng, o, a, b, la, lb, int(n), spec.object_label, seed,
                              (0.25, 0.45, 0.75), spec, uv_offset=(3.0 * k, 0.0), opacity=0.98))
    return Gaussians.concat(parts)


def _sphere(rng, spec: SceneSpec, center, radius, count, seed) -> Gaussians:
    if count <= 0:
        return Gaussians.empty()
    k = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * k / count)
    theta = math.pi * (1 + 5 ** 0.5) * k + rng.uniform(0, 0.3, count)
    normals = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    pos = np.asarray(center, float) + radius * normals
    sigma = 0.6 * radius * math.sqrt(4 * math.pi / count)
    ident = np.zeros((count, NUM_IDENTITY))
    ident[:, spec.object_label] = IDENTITY_SCALE
    uv = np.stack([theta % (2 * math.pi) * radius, pos[:, 2]], axis=1)
    return Gaussians(
        positions=pos,
        scales=np.tile([sigma, sigma, 0.15 * sigma], (count, 1)),
        rotations=np.array([_frame_quat(n) for n in normals]),
        opacities=np.full(count, 0.98),
        colors=_texture(uv, seed, spec, (0.75, 0.3, 0.3)),
        identities=ident,
    )


def _object(rng, spec: SceneSpec) -> tuple[Gaussians, np.ndarray]:
    """Object Gaussians and a predicate for floor points under its footprint."""
    cx, cy = spec.object_center
    sx, sy, sz = spec.object_size
    base = np.array([cx, cy, 0.0])
    n = spec.object_gaussians
    yaw = math.radians(spec.object_yaw)

    def in_box(p):
        d = p[:, :2] - base[:2]
        u = d[:, 0] * math.cos(yaw) + d[:, 1] * math.sin(yaw)
        v = -d[:, 0] * math.sin(yaw) + d[:, 1] * math.cos(yaw)
        return (np.abs(u) <= sx / 2) & (np.abs(v) <= sy / 2)

    if spec.object_shape == "box":
        return _box(rng, spec, base, (sx, sy, sz), n, spec.object_seed), in_box
    if spec.object_shape == "sphere":
        r = min(sx, sy, sz) / 2
        under = lambda p: np.hypot(p[:, 0] - cx, p[:, 1] - cy) <= 0.6 * r  # noqa: E731
        return _sphere(rng, spec, base + [0, 0, r], r, n, spec.object_seed), under
    r = min(sx, sy) / 3
    box_share = int(round(n * 0.6))
    parts = [_box(rng, spec, base, (sx, sy, sz), box_share, spec.object_seed),
             _sphere(rng, spec, base + [0, 0, sz + r], r, n - box_share, spec.object_seed + 1)]
    return Gaussians.concat(parts), in_box


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def rig_poses(spec: SceneSpec, holdout: bool = False) -> list[CameraPose]:
    k = spec.holdout_views if holdout else spec.num_views
    if k == 0:
        return []
    if spec.rig == "ring":
        step = 360.0 / spec.num_views
        start = spec.azimuth_offset + (step / 2 if holdout else 0.0)
        azimuths = [start + i * (360.0 / k) for i in range(k)]
    else:
        n = spec.num_views
        step = spec.arc_span / max(n - 1, 1)
        base = spec.azimuth_offset - spec.arc_span / 2
        if holdout:
            slots = max(n - 1, 1)
            azimuths = [base + step * ((i % slots) + 0.5) for i in range(k)]
        else:
            azimuths = [base + i * step for i in range(n)] if n > 1 else [spec.azimuth_offset]
    el = math.radians(spec.elevation)
    cx, cy = spec.object_center
    target = np.array([cx, cy, 0.35 * spec.object_size[2]])
    fx = spec.width / (2 * math.tan(math.radians(spec.fov) / 2))
    poses = []
    for az in azimuths:
        a = math.radians(az)
        eye = target + spec.rig_radius * np.array([math.cos(el) * math.cos(a), math.cos(el) * math.sin(a),
                                                   math.sin(el)])
        poses.append(CameraPose.look_at(eye, target, (0, 0, 1), fx, spec.width, spec.height))
    return poses


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _quantize(image: np.ndarray) -> np.ndarray:
    return io.to_uint8(image).astype(np.float64) / 255.0


def _object_masks(with_obj: Gaussians, obj_index: np.ndarray, removed: Gaussians, pose: CameraPose,
                  spec: SceneSpec):
    """Pixels the object influences: its own coverage or any visible change it causes."""
    full = render(with_obj, pose)
    indicator = np.zeros((len(with_obj), 3))
    indicator[obj_index, 0] = 1.0
    weight = render(with_obj.with_(colors=indicator), pose, identity=False).rgb[..., 0]
    gt = render(removed, pose, identity=False)
    mask = weight >= spec.mask_threshold
    mask |= np.max(np.abs(full.rgb - gt.rgb), axis=-1) > spec.mask_threshold
    return full, gt, mask


def _views(spec, with_obj, obj_index, removed, poses) -> list[View]:
    views = []
    for pose in poses:
        full, gt, mask = _object_masks(with_obj, obj_index, removed, pose, spec)
        if len(obj_index) == 0:
            mask[:] = False
        depth = np.where(gt.depth > 0, gt.depth.astype(np.float32).astype(np.float64), gt.depth)
        views.append(View(
            image=_quantize(full.rgb),
            pose=pose,
            mask=mask,
            labels=full.labels.astype(np.int64),
            gt_removed=_quantize(gt.rgb),
            gt_removed_depth=depth,
        ))
    return views


def sfm_points(gaussians: Gaussians, rng, position_noise: float, color_noise: float) -> ColoredPointCloud:
    """A sparse-reconstruction stand-in: jittered surface samples with noisy colors."""
    pts = gaussians.positions + rng.normal(scale=position_noise, size=gaussians.positions.shape)
    cols = np.clip(gaussians.colors + rng.normal(scale=color_noise, size=gaussians.colors.shape), 0, 1)
    return ColoredPointCloud(pts, _quantize(cols), np.zeros(len(pts)))


def generate(spec: SceneSpec) -> SynthScene:
    """Build and render a scene. A pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    floor = _floor(rng, spec)
    walls = _walls(rng, spec)
    obj, under = _object(rng, spec)
    keep = ~under(floor.positions) if len(obj) else np.ones(len(floor), bool)
    background = Gaussians.concat([floor.subset(keep), walls])
    with_obj = Gaussians.concat([background, obj])
    obj_index = np.arange(len(background), len(with_obj))
    removed = Gaussians.concat([floor, walls])

    dataset = Dataset(tuple(_views(spec, with_obj, obj_index, removed, rig_poses(spec))),
                      sfm_points(with_obj, rng, 0.01 * spec.room_size / 4, 0.03),
                      meta={"object_label": spec.object_label, "scene_spec": spec.to_dict()})
    holdout = None
    if spec.holdout_views:
        holdout = Dataset(tuple(_views(spec, with_obj, obj_index, removed, rig_poses(spec, holdout=True))),
                          meta={"object_label": spec.object_label, "split": "test"})
    return SynthScene(spec, with_obj, removed, obj_index, dataset, holdout)


def write_scene(scene: SynthScene, out_dir) -> None:
    """Dataset directory plus ``scene_gt.gsip``, ``scene_removed_gt.gsip`` and ``spec.json``."""
    root = Path(out_dir)
    save_dataset(scene.dataset, root)
    save_gaussians(scene.gaussians, root / "scene_gt.gsip")
    save_gaussians(scene.removed, root / "scene_removed_gt.gsip")
    (root / "spec.json").write_text(json.dumps(scene.spec.to_dict(), indent=1))
    if scene.holdout is not None:
        save_dataset(scene.holdout, root / "test")


# ---------------------------------------------------------------------------
# oracles and metrics
# ---------------------------------------------------------------------------

def scene_diameter(gaussians: Gaussians) -> float:
    if len(gaussians) == 0:
        return 1.0
    lo, hi = gaussians.positions.min(0), gaussians.positions.max(0)
    return float(np.linalg.norm(hi - lo)) or 1.0


def oracle_refined_masks(dataset: Dataset, removed: Gaussians, eps: float | None = None,
                         depths=None) -> list[np.ndarray]:
    """Masked pixels whose background point no other view observes.

    A pixel of M_i is covered when its background point (ray through the
    object-removed depth) lands in some other view k outside M_k at a depth that
    matches view k's object-removed depth within ``eps``.
    """
    if eps is None:
        eps = 0.01 * scene_diameter(removed)
    if depths is None:
        depths = [render(removed, v.pose, identity=False).depth for v in dataset.views]
    out = []
    for i, view in enumerate(dataset.views):
        hidden = view.mask.copy()
        vs, us = np.nonzero(view.mask & (depths[i] > 0))
        if len(vs) == 0:
            out.append(hidden)
            continue
        pts = backproject(us.astype(float), vs.astype(float), depths[i][vs, us], view.pose)
        seen = np.zeros(len(vs), bool)
        for k, other in enumerate(dataset.views):
            if k == i:
                continue
            u, v, z = project_points(pts, other.pose)
            ui, vi = np.floor(u + 0.5), np.floor(v + 0.5)
            ok = (z > 0) & (ui >= 0) & (ui < other.pose.width) & (vi >= 0) & (vi < other.pose.height)
            ui = np.where(ok, ui, 0).astype(np.int64)
            vi = np.where(ok, vi, 0).astype(np.int64)
            dk = depths[k][vi, ui]
            ok &= ~other.mask[vi, ui] & (dk > 0) & (np.abs(dk - z) <= eps)
            seen |= ok
        hidden[vs[seen], us[seen]] = False
        out.append(hidden)
    return out


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """PSNR on the [0,1] range, capped at 99 dB; ``None`` for an empty mask."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.any():
            return None
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def eval_metrics(rendered: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> dict:
    """PSNR and SSIM over the whole image and restricted to ``mask``.

    Masked SSIM averages the local SSIM map over masked pixels. Masked entries are
    ``None`` when the mask is empty or absent.
    """
    if rendered.shape != truth.shape:
        raise ValueError(f"resolution mismatch: {rendered.shape} vs {truth.shape}")
    smap = ssim_map(rendered, truth)
    out = {"psnr": psnr(rendered, truth), "ssim": float(np.mean(smap)),
           "masked_psnr": None, "masked_ssim": None}
    if mask is not None and np.any(mask):
        out["masked_psnr"] = psnr(rendered, truth, mask)
        out["masked_ssim"] = float(np.mean(smap[np.asarray(mask, bool)]))
    return out
