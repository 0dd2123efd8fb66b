"""Scene model: Gaussians, pinhole cameras, colored point clouds and multi-view datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io

NUM_IDENTITY = 16
DEPTH_SENTINEL = -1.0
BACKGROUND_LABEL = 0
POSES_FILE = "poses.json"


class ValidationError(ValueError):
    """Inputs violate a structural invariant (shapes, ranges, resolutions)."""


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussians:
    """A set of N splatting primitives, stored in activated form.

    Attributes:
        positions:  world-space centers, (N, 3).
        scales:     per-axis standard deviations, strictly positive, (N, 3).
        rotations:  unit quaternions ``(w, x, y, z)``, (N, 4).
        opacities:  opacity in [0, 1], (N,).
        colors:     base RGB color in [0, 1] (degree-0 SH), (N, 3).
        identities: identity-encoding logits, (N, 16).

    The flat parameter layout (``to_table``) follows the field order above,
    30 values per Gaussian.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    identities: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        shapes = {
            "positions": (n, 3), "scales": (n, 3), "rotations": (n, 4),
            "opacities": (n,), "colors": (n, 3), "identities": (n, NUM_IDENTITY),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls.create(0)

    @classmethod
    def create(cls, n: int, **overrides) -> "Gaussians":
        """N default Gaussians (origin, scale 1/16, identity rotation, opacity 0.5, gray)."""
        fields = dict(
            positions=np.zeros((n, 3)),
            scales=np.full((n, 3), 0.0625),
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            opacities=np.full(n, 0.5),
            colors=np.full((n, 3), 0.5),
            identities=np.zeros((n, NUM_IDENTITY)),
        )
        for key, value in overrides.items():
            fields[key] = np.broadcast_to(np.asarray(value, dtype=np.float64), fields[key].shape).copy()
        return cls(**fields)

    def validate(self, quat_tol: float = 1e-6) -> None:
        if not np.all(np.isfinite(self.to_table())):
            raise ValidationError("non-finite Gaussian parameters")
        if np.any(self.scales <= 0):
            raise ValidationError("scales must be strictly positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValidationError("opacities must lie in [0, 1]")
        if len(self) and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > quat_tol:
            raise ValidationError("rotations must be unit quaternions")

    def labels(self) -> np.ndarray:
        """Per-Gaussian identity label (argmax of the identity logits)."""
        return np.argmax(self.identities, axis=1) if len(self) else np.zeros(0, dtype=np.int64)

    def subset(self, index) -> "Gaussians":
        return Gaussians(
            self.positions[index], self.scales[index], self.rotations[index],
            self.opacities[index], self.colors[index], self.identities[index],
        )

    def with_(self, **changes) -> "Gaussians":
        return replace(self, **changes)

    @staticmethod
    def concat(parts: Sequence["Gaussians"]) -> "Gaussians":
        return Gaussians.from_table(np.concatenate([p.to_table() for p in parts], axis=0))

    def to_table(self) -> np.ndarray:
        return np.concatenate(
            [self.positions, self.scales, self.rotations, self.opacities[:, None],
             self.colors, self.identities], axis=1,
        ).reshape(len(self), io.GSIP_FIELDS)

    @classmethod
    def from_table(cls, table: np.ndarray) -> "Gaussians":
        table = np.asarray(table, dtype=np.float64).reshape(-1, io.GSIP_FIELDS)
        return cls(table[:, 0:3], table[:, 3:6], table[:, 6:10], table[:, 10],
                   table[:, 11:14], table[:, 14:30])

    def equals(self, other: "Gaussians") -> bool:
        return len(self) == len(other) and np.array_equal(self.to_table(), other.to_table())


def save_gaussians(gaussians: Gaussians, path: str | Path) -> None:
    """Write Gaussians as GSIP. Parameters are stored as float32."""
    io.write_gsip(path, gaussians.to_table())


def load_gaussians(path: str | Path) -> Gaussians:
    return Gaussians.from_table(io.read_gsip(path))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), normalized internally, to (..., 3, 3) matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation matrices to (..., 4) unit quaternions with w >= 0."""
    from scipy.spatial.transform import Rotation

    m = np.asarray(m, dtype=np.float64)
    xyzw = Rotation.from_matrix(m.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q[q[:, 0] < 0] *= -1
    return q.reshape(m.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera. ``rotation``/``translation`` map world to camera (x right, y down, z forward).

    Pixel (row v, column u) is centered at continuous image coordinate (u, v).
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def validate(self) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8, rtol=0) or np.linalg.det(r) < 0:
            raise ValidationError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    @classmethod
    def look_at(cls, eye, target, up, fx: float, width: int, height: int, fy: float | None = None,
                cx: float | None = None, cy: float | None = None) -> "CameraPose":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, fx, fx if fy is None else fy,
                   (width - 1) / 2 if cx is None else cx,
                   (height - 1) / 2 if cy is None else cy, width, height)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        try:
            return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"],
                       d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])
        except (KeyError, ValueError, TypeError) as err:
            raise io.FormatError(f"malformed camera entry: {err}") from err


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColoredPointCloud:
    """3D points with RGB colors and the depth they had in their source view."""

    points: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float64).reshape(-1))
        if not (len(self.points) == len(self.colors) == len(self.depths)):
            raise ValidationError("point cloud arrays differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    def save_ply(self, path: str | Path) -> None:
        io.write_ply(path, self.points, self.colors)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class View:
    image: np.ndarray
    pose: CameraPose
    mask: np.ndarray
    labels: np.ndarray | None = None
    gt_removed: np.ndarray | None = None
    gt_removed_depth: np.ndarray | None = None

    def validate(self, index: int = 0) -> None:
        self.pose.validate()
        shape = self.pose.shape
        if self.image.shape != shape + (3,):
            raise ValidationError(f"view {index}: image {self.image.shape[:2]} does not match pose {shape}")
        if self.mask.shape != shape:
            raise ValidationError(f"view {index}: mask {self.mask.shape} does not match pose {shape}")
        for name in ("labels", "gt_removed_depth"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise ValidationError(f"view {index}: {name} {arr.shape} does not match pose {shape}")
        if self.gt_removed is not None and self.gt_removed.shape != shape + (3,):
            raise ValidationError(f"view {index}: gt_removed does not match pose {shape}")


@dataclass(frozen=True)
class Dataset:
    views: tuple[View, ...]
    points: ColoredPointCloud | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))

    def __len__(self) -> int:
        return len(self.views)

    @property
    def poses(self) -> list[CameraPose]:
        return [v.pose for v in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def masks(self) -> list[np.ndarray]:
        return [v.mask for v in self.views]

    @property
    def has_labels(self) -> bool:
        return all(v.labels is not None for v in self.views)

    def validate(self) -> None:
        if len(self.views) < 1:
            raise ValidationError("dataset must contain at least one view")
        for i, view in enumerate(self.views):
            view.validate(i)

    def permuted(self, order: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.views[i] for i in order), self.points, dict(self.meta))

    def camera_extent(self) -> float:
        """Radius of the camera-center cloud around its mean, scaled by 1.1."""
        centers = np.array([p.center for p in self.poses])
        return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1)) or 1.0)


def _view_file(kind: str, index: int, ext: str = "png") -> str:
    return f"{kind}/view_{index:03d}.{ext}"


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory (``poses.json``, ``images/``, ``masks/`` and optional extras)."""
    root = Path(path)
    poses_path = root / POSES_FILE
    if not poses_path.exists():
        raise io.FormatError(f"{POSES_FILE} not found in {root}")
    try:
        doc = json.loads(poses_path.read_text())
    except json.JSONDecodeError as err:
        raise io.FormatError(f"{POSES_FILE}: invalid JSON ({err})") from err
    if "views" not in doc:
        raise io.FormatError(f"{POSES_FILE}: missing 'views'")
    views = []
    for i, entry in enumerate(doc["views"]):
        pose = CameraPose.from_dict(entry)
        optional = {}
        if (root / _view_file("labels", i)).exists():
            optional["labels"] = io.read_png_gray(root / _view_file("labels", i)).astype(np.int64)
        if (root / _view_file("gt_removed", i)).exists():
            optional["gt_removed"] = io.read_png_rgb(root / _view_file("gt_removed", i))
        if (root / _view_file("gt_removed_depth", i, "pfm")).exists():
            optional["gt_removed_depth"] = io.read_pfm(root / _view_file("gt_removed_depth", i, "pfm"),
                                                       sentinel=DEPTH_SENTINEL)
        views.append(View(
            image=io.read_png_rgb(root / _view_file("images", i)),
            pose=pose,
            mask=io.read_mask_png(root / _view_file("masks", i)),
            **optional,
        ))
    points = None
    if (root / "points3d.ply").exists():
        pts, cols = io.read_ply(root / "points3d.ply")
        points = ColoredPointCloud(pts, cols, np.zeros(len(pts)))
    dataset = Dataset(tuple(views), points, doc.get("meta", {}))
    dataset.validate()
    return dataset


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    doc = {"format": "gsinpaint-dataset", "version": 1, "meta": dataset.meta,
           "views": [v.pose.to_dict() for v in dataset.views]}
    (root / POSES_FILE).write_text(json.dumps(doc, indent=1))
    for i, view in enumerate(dataset.views):
        io.write_png(root / _view_file("images", i), view.image)
        io.write_mask_png(root / _view_file("masks", i), view.mask)
        if view.labels is not None:
            io.write_png(root / _view_file("labels", i), np.asarray(view.labels, dtype=np.uint8))
        if view.gt_removed is not None:
            io.write_png(root / _view_file("gt_removed", i), view.gt_removed)
        if view.gt_removed_depth is not None:
            io.write_pfm(root / _view_file("gt_removed_depth", i, "pfm"), view.gt_removed_depth)
    if dataset.points is not None:
        dataset.points.save_ply(root / "points3d.ply")
