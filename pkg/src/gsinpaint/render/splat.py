"""Tile-based splat rendering of RGB, expected depth, identity logits and coverage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import BACKGROUND_LABEL, DEPTH_SENTINEL, NUM_IDENTITY, CameraPose, Gaussians
from . import _kernels

TILE = 8
NEAR = 0.01
COVERAGE_FLOOR = 1e-3
BLUR = 0.3  # screen-space dilation (px^2) added to every projected covariance


@dataclass(frozen=True)
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray
    identity: np.ndarray | None = None
    coverage_floor: float = COVERAGE_FLOOR

    @property
    def valid(self) -> np.ndarray:
        return self.coverage >= self.coverage_floor

    @property
    def labels(self) -> np.ndarray:
        if self.identity is None:
            raise ValueError("view was rendered without identity channels")
        return labels_from_identity(self.identity, self.coverage, self.coverage_floor)


def labels_from_identity(identity: np.ndarray, coverage: np.ndarray, floor: float = COVERAGE_FLOOR) -> np.ndarray:
    labels = np.argmax(identity, axis=-1)
    labels[coverage < floor] = BACKGROUND_LABEL
    return labels


@dataclass(frozen=True)
class SplatGradients:
    """Partials of a scalar loss w.r.t. every Gaussian parameter (activated space)."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    identities: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, NUM_IDENTITY)))

    def __add__(self, other: "SplatGradients") -> "SplatGradients":
        return SplatGradients(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self):
        return (self.positions, self.scales, self.rotations, self.opacities, self.colors, self.identities)

    def to_table(self) -> np.ndarray:
        return np.concatenate([self.positions, self.scales, self.rotations, self.opacities[:, None],
                               self.colors, self.identities], axis=1)


@dataclass
class _Projection:
    """Per-Gaussian screen-space quantities plus what the adjoint needs."""

    p_cam: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    tile_rect: np.ndarray
    order: np.ndarray
    visible: np.ndarray


def _project(g: Gaussians, pose: CameraPose, blur: float) -> _Projection:
    p_cam, mean2d, conic, cov_cam, rot, q_unit, q_norm, tile_rect, visible = _kernels.project(
        g.positions, g.scales, g.rotations, pose.rotation, pose.translation, pose.fx, pose.fy,
        pose.cx, pose.cy, pose.width, pose.height, blur, NEAR, TILE)
    idx = np.nonzero(visible)[0]
    order = idx[np.lexsort((idx, p_cam[idx, 2]))]
    return _Projection(p_cam, mean2d, conic, cov_cam, rot, q_unit, q_norm, tile_rect,
                       order.astype(np.int64), visible)


class Frame:
    """One rasterization of a Gaussian set from one pose, kept around for the adjoint pass."""

    def __init__(self, gaussians: Gaussians, pose: CameraPose, *, identity: bool = True,
                 coverage_floor: float = COVERAGE_FLOOR, blur: float = BLUR):
        self.gaussians = gaussians
        self.pose = pose
        self.coverage_floor = coverage_floor
        self.with_identity = identity
        self.proj = proj = _project(gaussians, pose, blur)
        self.tiles_x = -(-pose.width // TILE)
        tiles_y = -(-pose.height // TILE)
        self.offsets, self.items = _kernels.bin_gaussians(proj.order, proj.tile_rect, self.tiles_x,
                                                          self.tiles_x * tiles_y)
        ident = gaussians.identities if identity else np.zeros((len(gaussians), 0))
        self._ident = np.ascontiguousarray(ident)
        self._depth = np.ascontiguousarray(proj.p_cam[:, 2])
        rgb, dacc, trans, feat = _kernels.rasterize_forward(
            self.offsets, self.items, proj.mean2d, proj.conic, gaussians.opacities, gaussians.colors,
            self._depth, self._ident, pose.height, pose.width, TILE, self.tiles_x)
        coverage = 1.0 - trans
        valid = coverage >= coverage_floor
        depth = np.full(coverage.shape, DEPTH_SENTINEL)
        depth[valid] = dacc[valid] / coverage[valid]
        self._dacc = dacc
        self.view = RenderedView(rgb, depth, coverage, feat if identity else None, coverage_floor)

    def backward(self, grad_rgb: np.ndarray | None = None, grad_depth: np.ndarray | None = None,
                 grad_identity: np.ndarray | None = None,
                 grad_coverage: np.ndarray | None = None, trainable: np.ndarray | None = None) -> SplatGradients:
        """Chain per-pixel adjoints back to the Gaussian parameters.

        With ``trainable`` (bool per Gaussian) only tiles touched by a trainable
        Gaussian are visited: their gradients are exact, the others are not.
        """
        h, w = self.pose.shape
        n = len(self.gaussians)
        g_rgb = np.zeros((h, w, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64)
        g_cov = np.zeros((h, w)) if grad_coverage is None else np.array(grad_coverage, dtype=np.float64)
        g_dacc = np.zeros((h, w))
        for name, arr, shape in (("rgb", grad_rgb, (h, w, 3)), ("depth", grad_depth, (h, w)),
                                 ("identity", grad_identity, (h, w, NUM_IDENTITY)),
                                 ("coverage", grad_coverage, (h, w))):
            if arr is None:
                continue
            if np.shape(arr) != shape:
                raise ValueError(f"{name} adjoint has shape {np.shape(arr)}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} adjoint")
        if grad_depth is not None:
            valid = self.view.valid
            cov = np.where(valid, self.view.coverage, 1.0)
            gd = np.where(valid, grad_depth, 0.0)
            # depth = dacc / coverage
            g_dacc = gd / cov
            g_cov = g_cov - gd * np.where(valid, self.view.depth, 0.0) / cov
        if grad_identity is not None and self.with_identity:
            g_feat = np.ascontiguousarray(grad_identity, dtype=np.float64)
        else:
            g_feat = np.zeros((h, w, 0))
        proj = self.proj
        g = self.gaussians
        n_tiles = len(self.offsets) - 1
        if trainable is None:
            active = np.ones(n_tiles, dtype=np.bool_)
            index = np.nonzero(proj.visible)[0]
        else:
            index = np.nonzero(np.asarray(trainable, bool) & proj.visible)[0]
            active = _kernels.mark_tiles(index, proj.tile_rect, self.tiles_x, n_tiles)
        g_mean2d, g_conic, g_op, g_col, g_z, g_id = _kernels.rasterize_backward(
            self.offsets, self.items, proj.mean2d, proj.conic, g.opacities, g.colors, self._depth,
            self._ident, h, w, TILE, self.tiles_x, np.ascontiguousarray(g_rgb), g_dacc, g_cov, g_feat,
            active)
        if not self.with_identity:
            g_id = np.zeros((n, NUM_IDENTITY))
        g_pos, g_scale, g_quat = _project_backward(proj, self.pose, g.scales, g_mean2d, g_conic, g_z, index)
        return SplatGradients(g_pos, g_scale, g_quat, g_op, g_col, g_id)


def _project_backward(proj: _Projection, pose: CameraPose, scales: np.ndarray, g_mean2d, g_conic, g_z,
                      index: np.ndarray):
    return _kernels.project_backward(index, proj.p_cam, proj.conic, proj.cov_cam, proj.rot, proj.quat_unit,
                                     proj.quat_norm, scales, pose.rotation, pose.fx, pose.fy,
                                     g_mean2d, g_conic, g_z)


def render(gaussians: Gaussians, pose: CameraPose, *, identity: bool = True,
           coverage_floor: float = COVERAGE_FLOOR) -> RenderedView:
    """Composite the Gaussians front to back into RGB, expected depth, identity logits and coverage."""
    return Frame(gaussians, pose, identity=identity, coverage_floor=coverage_floor).view


def render_with_gradients(gaussians: Gaussians, pose: CameraPose, grad_rgb=None, grad_depth=None,
                          grad_identity=None, coverage_floor: float = COVERAGE_FLOOR) -> SplatGradients:
    frame = Frame(gaussians, pose, identity=grad_identity is not None, coverage_floor=coverage_floor)
    return frame.backward(grad_rgb, grad_depth, grad_identity)


def render_labels(gaussians: Gaussians, pose: CameraPose, coverage_floor: float = COVERAGE_FLOOR) -> np.ndarray:
    """Per-pixel argmax of the composited identity logits; background below the coverage floor."""
    return render(gaussians, pose, identity=True, coverage_floor=coverage_floor).labels
