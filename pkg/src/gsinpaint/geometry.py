"""Lifting pixels to colored 3D points and splatting points back into a view with a z-buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraPose, ColoredPointCloud


@dataclass(frozen=True)
class ProjectedPixels:
    """Sparse pixels in a target view, at most one per (u, v) after z-resolution."""

    u: np.ndarray
    v: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    source: np.ndarray  # index of the winning point in the projected cloud

    def __len__(self) -> int:
        return len(self.u)

    @classmethod
    def empty(cls) -> "ProjectedPixels":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0),
                   np.zeros(0, np.int64))

    def subset(self, keep: np.ndarray) -> "ProjectedPixels":
        return ProjectedPixels(self.u[keep], self.v[keep], self.colors[keep], self.depths[keep],
                               self.source[keep])

    def to_mask(self, shape: tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        mask[self.v, self.u] = True
        return mask

    def to_image(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Dense (H, W, 3) color image and its coverage mask."""
        img = np.zeros(shape + (3,))
        img[self.v, self.u] = self.colors
        return img, self.to_mask(shape)


def project_points(points: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (u, v) and camera depth z of world points."""
    pc = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.fx * pc[:, 0] / z + pose.cx
        v = pose.fy * pc[:, 1] / z + pose.cy
    return u, v, z


def backproject(u, v, depth, pose: CameraPose) -> np.ndarray:
    """Vectorized pixel + depth to world point."""
    u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
    pc = np.stack([(u - pose.cx) / pose.fx * depth, (v - pose.cy) / pose.fy * depth, depth], axis=-1)
    return pose.camera_to_world(pc)


def backproject_pixel(u: float, v: float, depth: float, pose: CameraPose) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return backproject(u, v, depth, pose)


def proj3d(image: np.ndarray, select: np.ndarray, depth: np.ndarray, pose: CameraPose) -> ColoredPointCloud:
    """Lift every selected pixel with a valid depth to a colored world point.

    Selected pixels without a surface (depth <= 0) are skipped and counted in ``skipped``.
    Points are emitted in row-major pixel order.
    """
    select = np.asarray(select, dtype=bool)
    ok = select & (depth > 0)
    v, u = np.nonzero(ok)
    d = depth[v, u]
    points = backproject(u.astype(np.float64), v.astype(np.float64), d, pose)
    return ColoredPointCloud(points, image[v, u], d, skipped=int(select.sum() - ok.sum()))


def proj2d(cloud: ColoredPointCloud, pose: CameraPose) -> ProjectedPixels:
    """Splat points into ``pose`` with nearest-pixel landing; nearest depth wins, ties by lower index."""
    if len(cloud) == 0:
        return ProjectedPixels.empty()
    u, v, z = project_points(cloud.points, pose)
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    keep = (z > 0) & np.isfinite(ui) & np.isfinite(vi)
    keep &= (ui >= 0) & (ui < pose.width) & (vi >= 0) & (vi < pose.height)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return ProjectedPixels.empty()
    ui = ui[idx].astype(np.int64)
    vi = vi[idx].astype(np.int64)
    pix = vi * pose.width + ui
    order = np.lexsort((idx, z[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    src = idx[win]
    return ProjectedPixels(ui[win], vi[win], cloud.colors[src], z[src], src)
