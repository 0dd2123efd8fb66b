"""2D inpainting backends operating jointly on an RGB image and its depth map.

Every backend edits pixels inside the mask only; anything it touches outside is
put back afterwards and counted in ``InpaintResult.restored``.
"""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .scene import DEPTH_SENTINEL

log = logging.getLogger(__name__)

BACKENDS = ("constant", "diffuse", "oracle", "external")
FALLBACK_VALUE = 0.5
_FOUR = ndimage.generate_binary_structure(2, 1)


class InpaintError(RuntimeError):
    pass


@dataclass(frozen=True)
class InpaintRequest:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), sentinel where there is no surface
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise InpaintError(
                f"request shapes disagree: image {self.image.shape}, depth {self.depth.shape}, mask {self.mask.shape}")


@dataclass(frozen=True)
class InpaintResult:
    image: np.ndarray
    depth: np.ndarray
    restored: int = 0  # outside-mask pixels the backend changed and that were put back


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _neighbor_stats(x: np.ndarray, known: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum and count of in-bounds 4-neighbours (values weighted by ``known``)."""
    xs = np.pad(np.where(known, x, 0.0), 1)
    ks = np.pad(known.astype(np.float64), 1)
    s = xs[:-2, 1:-1] + xs[2:, 1:-1] + xs[1:-1, :-2] + xs[1:-1, 2:]
    n = ks[:-2, 1:-1] + ks[2:, 1:-1] + ks[1:-1, :-2] + ks[1:-1, 2:]
    return s, n


def diffuse_fill(channel: np.ndarray, mask: np.ndarray, iterations: int = 20000,
                 tolerance: float = 1e-7) -> np.ndarray:
    """Harmonic fill of one channel by Jacobi iteration of 4-neighbour averaging.

    Hole components with no unmasked neighbour are set to the global unmasked mean
    (0.5 when nothing is unmasked) and held fixed.
    """
    out = np.array(channel, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return out
    known = ~mask
    fallback = float(out[known].mean()) if known.any() else FALLBACK_VALUE
    labels, n_comp = ndimage.label(mask, structure=_FOUR)
    touching = ndimage.binary_dilation(known, structure=_FOUR) & mask
    live_ids = np.unique(labels[touching])
    live = np.isin(labels, live_ids[live_ids > 0])
    out[mask & ~live] = fallback
    if not live.any():
        return out
    # start each component from the mean of its boundary values
    s, n = _neighbor_stats(out, known)
    seed_sum = ndimage.sum(s, labels, index=np.arange(1, n_comp + 1))
    seed_cnt = ndimage.sum(n, labels, index=np.arange(1, n_comp + 1))
    seeds = np.divide(seed_sum, seed_cnt, out=np.full(n_comp, fallback), where=seed_cnt > 0)
    out[live] = seeds[labels[live] - 1]
    inb = np.ones_like(out, dtype=bool)
    _, deg = _neighbor_stats(out, inb)
    for _ in range(iterations):
        s, _ = _neighbor_stats(out, inb)
        new = s[live] / deg[live]
        delta = np.max(np.abs(new - out[live]))
        out[live] = new
        if delta < tolerance:
            break
    return out


def boundary_depth(depth: np.ndarray, mask: np.ndarray) -> float | None:
    """Mean of valid depths on unmasked pixels 4-adjacent to the mask."""
    ring = ndimage.binary_dilation(mask, structure=_FOUR) & ~mask & (depth > 0)
    return float(depth[ring].mean()) if ring.any() else None


def _fill_depth_diffuse(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    unknown = mask | ~(depth > 0)
    filled = diffuse_fill(np.where(unknown, 0.0, depth), unknown)
    return np.where(mask, filled, depth)


def _ensure_positive_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    bad = mask & ~(depth > 0)
    if not bad.any():
        return depth
    return np.where(bad, _fill_depth_diffuse(np.where(bad, DEPTH_SENTINEL, depth), bad), depth)


def _restore_outside(req: InpaintRequest, image: np.ndarray, depth: np.ndarray,
                     changed: np.ndarray | None = None) -> InpaintResult:
    outside = ~req.mask
    if changed is None:
        changed = np.any(image != req.image, axis=-1) | (depth != req.depth)
    restored = int(np.count_nonzero(changed & outside))
    if restored:
        log.warning("inpainter modified %d pixels outside the mask; restored them", restored)
    image = np.where(outside[..., None], req.image, image)
    depth = np.where(outside, req.depth, depth)
    return InpaintResult(image, _ensure_positive_depth(depth, req.mask), restored)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def constant_fill(req: InpaintRequest, value: float = FALLBACK_VALUE) -> InpaintResult:
    image = np.where(req.mask[..., None], value, req.image)
    fill = boundary_depth(req.depth, req.mask)
    if fill is None:
        valid = req.depth > 0
        fill = float(req.depth[valid].mean()) if valid.any() else 1.0
    depth = np.where(req.mask, fill, req.depth)
    return _restore_outside(req, image, depth)


def diffuse_backend(req: InpaintRequest) -> InpaintResult:
    image = np.stack([diffuse_fill(req.image[..., c], req.mask) for c in range(3)], axis=-1)
    return _restore_outside(req, image, _fill_depth_diffuse(req.depth, req.mask))


def oracle_fill(req: InpaintRequest, truth_image: np.ndarray | None,
                truth_depth: np.ndarray | None) -> InpaintResult:
    if truth_image is None or truth_depth is None:
        raise InpaintError("oracle inpainter needs the ground-truth object-removed image and depth")
    if truth_image.shape != req.image.shape or truth_depth.shape != req.depth.shape:
        raise InpaintError("ground truth resolution differs from the request")
    image = np.where(req.mask[..., None], truth_image, req.image)
    depth = np.where(req.mask, truth_depth, req.depth)
    return _restore_outside(req, image, depth)


EXCHANGE_INPUTS = ("in_rgb.png", "in_depth.pfm", "in_mask.png")
EXCHANGE_OUTPUTS = ("out_rgb.png", "out_depth.pfm")


def external_exchange(req: InpaintRequest, directory: str | os.PathLike, timeout: float = 600.0,
                      command: str | None = None, poll: float = 0.05) -> InpaintResult:
    """Hand the request to an outside tool through files and wait for its answer.

    Writes ``in_rgb.png``, ``in_depth.pfm`` and ``in_mask.png`` to ``directory`` and
    waits for ``out_rgb.png`` and ``out_depth.pfm``. If ``command`` is given it is run
    in the directory after the inputs are written.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in EXCHANGE_OUTPUTS:
        (d / name).unlink(missing_ok=True)
    io.write_png(d / "in_rgb.png", req.image)
    io.write_pfm(d / "in_depth.pfm", req.depth)
    io.write_mask_png(d / "in_mask.png", req.mask)
    sent_rgb = io.read_png_rgb(d / "in_rgb.png")
    sent_depth = io.read_pfm(d / "in_depth.pfm")

    proc = None
    if command:
        proc = subprocess.Popen(shlex.split(command), cwd=d)
    deadline = time.monotonic() + timeout
    try:
        while True:
            if all((d / n).exists() for n in EXCHANGE_OUTPUTS):
                try:
                    image = io.read_png_rgb(d / "out_rgb.png")
                    depth = io.read_pfm(d / "out_depth.pfm")
                    break
                except (OSError, ValueError):
                    pass  # still being written
            if proc is not None and proc.poll() not in (None, 0):
                raise InpaintError(f"external inpainter exited with status {proc.returncode}; "
                                   f"exchange files kept in {d}")
            if time.monotonic() > deadline:
                raise InpaintError(f"external inpainter timed out after {timeout:g}s; exchange files kept in {d}")
            time.sleep(poll)
    finally:
        if proc is not None and proc.poll() is None:
            proc.kill()
            proc.wait()
    if image.shape != req.image.shape or depth.shape != req.depth.shape:
        raise InpaintError(f"external inpainter returned the wrong resolution; exchange files kept in {d}")
    # compare against what was actually sent, so file quantization is not counted as an edit
    changed = np.any(image != sent_rgb, axis=-1) | (depth != sent_depth)
    return _restore_outside(req, image, depth, changed)


def inpaint(request: InpaintRequest, backend: str = "diffuse", *, truth=None,
            fill_value: float = FALLBACK_VALUE, exchange_dir=None, timeout: float = 600.0,
            command: str | None = None) -> InpaintResult:
    """Dispatch to a backend. ``truth`` is the ``(image, depth)`` pair the oracle copies from."""
    if backend not in BACKENDS:
        raise InpaintError(f"unknown inpainter {backend!r}; choose from {', '.join(BACKENDS)}")
    if not request.mask.any():
        return InpaintResult(request.image.copy(), request.depth.copy())
    if backend == "constant":
        return constant_fill(request, fill_value)
    if backend == "diffuse":
        return diffuse_backend(request)
    if backend == "oracle":
        t_img, t_depth = truth if truth is not None else (None, None)
        return oracle_fill(request, t_img, t_depth)
    if exchange_dir is None:
        raise InpaintError("external inpainter needs an exchange directory")
    return external_exchange(request, exchange_dir, timeout=timeout, command=command)
