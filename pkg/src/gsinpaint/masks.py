"""Depth-guided inpainting masks: drop object-mask pixels whose background another view has seen."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import ProjectedPixels, proj2d, proj3d
from .scene import ColoredPointCloud, Dataset

DEFAULT_OPENING_RADIUS = 2


@dataclass(frozen=True)
class MaskSet:
    """Per-view object masks, refined inpainting masks and background composites.

    ``unopened`` holds the refined masks before morphological opening.
    """

    original: tuple[np.ndarray, ...]
    refined: tuple[np.ndarray, ...]
    unopened: tuple[np.ndarray, ...]
    backgrounds: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.original)

    def areas(self) -> list[int]:
        return [int(m.sum()) for m in self.refined]


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def open_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological opening (erosion then dilation) with a disc of the given pixel radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    se = disc(radius)
    eroded = ndimage.binary_erosion(mask, structure=se, border_value=0)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0)


def background_cloud(dataset: Dataset, depths: Sequence[np.ndarray], k: int) -> ColoredPointCloud:
    """Unmasked pixels of view k lifted to 3D through its rendered depth."""
    view = dataset.views[k]
    return proj3d(view.image, ~view.mask, depths[k], view.pose)


def visible_background(i: int, k: int, dataset: Dataset, depths: Sequence[np.ndarray],
                       cloud: ColoredPointCloud | None = None) -> ProjectedPixels:
    """Background pixels of view k that land inside view i's object mask."""
    if cloud is None:
        cloud = background_cloud(dataset, depths, k)
    target = dataset.views[i]
    hits = proj2d(cloud, target.pose)
    return hits.subset(target.mask[hits.v, hits.u])


def _refine(i: int, dataset: Dataset, clouds: Sequence[ColoredPointCloud], radius: int):
    view = dataset.views[i]
    others = [clouds[k] for k in range(len(dataset)) if k != i]
    background = view.image * (~view.mask)[..., None]
    if not others or not view.mask.any():
        unopened = view.mask.copy()
        return open_mask(unopened, radius), unopened, background
    merged = ColoredPointCloud(
        np.concatenate([c.points for c in others]),
        np.concatenate([c.colors for c in others]),
        np.concatenate([c.depths for c in others]),
    )
    # one z-buffer over every source view: the fill color is the point nearest to camera i
    hits = proj2d(merged, view.pose)
    hits = hits.subset(view.mask[hits.v, hits.u])
    unopened = view.mask.copy()
    unopened[hits.v, hits.u] = False
    background = background.copy()
    background[hits.v, hits.u] = hits.colors
    return open_mask(unopened, radius), unopened, background


def refine_mask(i: int, dataset: Dataset, depths: Sequence[np.ndarray],
                radius: int = DEFAULT_OPENING_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Refined inpainting mask M'_i and background composite I'B_i for one target view."""
    clouds = [background_cloud(dataset, depths, k) if k != i else ColoredPointCloud.empty()
              for k in range(len(dataset))]
    refined, _, background = _refine(i, dataset, clouds, radius)
    return refined, background


def refine_all(dataset: Dataset, depths: Sequence[np.ndarray],
               radius: int = DEFAULT_OPENING_RADIUS) -> MaskSet:
    clouds = [background_cloud(dataset, depths, k) for k in range(len(dataset))]
    results = [_refine(i, dataset, clouds, radius) for i in range(len(dataset))]
    return MaskSet(
        original=tuple(v.mask.copy() for v in dataset.views),
        refined=tuple(r[0] for r in results),
        unopened=tuple(r[1] for r in results),
        backgrounds=tuple(r[2] for r in results),
    )
