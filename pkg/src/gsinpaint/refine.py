"""Scene fitting, object removal and inpainting-guided refinement."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import losses
from .geometry import proj2d, proj3d
from .inpaint import InpaintRequest, InpaintResult, inpaint
from .masks import MaskSet
from .optim import GaussianAdam, LearningRates
from .render import COVERAGE_FLOOR, Frame, render
from .scene import (BACKGROUND_LABEL, CameraPose, ColoredPointCloud, Dataset, Gaussians,
                    save_gaussians)
from .synth import psnr

log = logging.getLogger(__name__)

KNN = 5


class FitError(RuntimeError):
    pass


class RefineError(RuntimeError):
    pass


class NothingToInpaint(RuntimeError):
    """Every refined mask is empty: removal alone already explains all views."""


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    rates: LearningRates = LearningRates()
    lam: float = losses.DEFAULT_LAMBDA
    loss_variant: str = "literal"
    identity_weight: float = 1.0
    coverage_floor: float = COVERAGE_FLOOR
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "rates" in d:
            d["rates"] = LearningRates.from_dict(d["rates"])
        return cls(**d)


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 5000
    reinpaint_period: int = 500
    rates: LearningRates = LearningRates()
    lam: float = losses.DEFAULT_LAMBDA
    opening_radius: int = 2
    inpainter: str = "diffuse"
    seed: int = 0
    coverage_floor: float = COVERAGE_FLOOR
    freeze: bool = True
    checkpoint_every: int = 1000
    perceptual_seed: int = 0
    depth_weight: float = 1.0
    cross_weight: float = 1.0
    frozen_eval_every: int = 500  # how often the frozen-target losses are logged
    exchange_dir: str | None = None
    external_timeout: float = 600.0
    external_command: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.reinpaint_period <= 0:
            raise ValueError("reinpaint_period must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        d = dict(d)
        if "rates" in d:
            d["rates"] = LearningRates.from_dict(d["rates"])
        return cls(**d)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def init_from_points(cloud: ColoredPointCloud, opacity: float = 0.1) -> Gaussians:
    """Isotropic Gaussians at the points, sized by the mean distance to 3 neighbours."""
    n = len(cloud)
    if n == 0:
        raise FitError("cannot initialize from an empty point cloud")
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(cloud.points).query(cloud.points, k=k)
        dist = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
        dist = np.maximum(dist, 1e-7)
    else:
        dist = np.full(1, 0.01)
    return Gaussians.create(n, positions=cloud.points, scales=np.repeat(dist[:, None], 3, axis=1),
                            opacities=opacity, colors=np.clip(cloud.colors, 0, 1))


def mean_psnr(gaussians: Gaussians, dataset: Dataset) -> float:
    return float(np.mean([psnr(render(gaussians, v.pose, identity=False).rgb, v.image) for v in dataset.views]))


def fit(dataset: Dataset, init: Gaussians, config: FitConfig = FitConfig(),
        callback: Callable[[int, dict], None] | None = None) -> Gaussians:
    """Minimize the photometric loss (plus identity cross-entropy when labels exist), one view per step."""
    if config.iterations == 0 or len(init) == 0:
        return init
    use_id = dataset.has_labels and config.identity_weight > 0
    opt = GaussianAdam(init, config.rates, position_scale=dataset.camera_extent(),
                       train_identity=use_id, total_steps=config.iterations)
    g = init
    k = len(dataset)
    for it in range(config.iterations):
        view = dataset.views[it % k]
        frame = Frame(g, view.pose, identity=use_id, coverage_floor=config.coverage_floor)
        value, g_rgb = losses.l_image_with_grad(frame.view.rgb, view.image, config.lam, config.loss_variant)
        parts = {"image": value}
        g_id = None
        if use_id:
            ce, g_id = losses.identity_ce_with_grad(frame.view.identity, view.labels)
            parts["id"] = ce
            value += config.identity_weight * ce
            g_id = g_id * config.identity_weight
        if not math.isfinite(value):
            raise FitError(f"non-finite loss at iteration {it}: {parts}")
        grads = frame.backward(grad_rgb=g_rgb)
        if use_id:
            # labels shape the identity encodings only; letting them move geometry costs photometric accuracy
            grads = replace(grads, identities=frame.backward(grad_identity=g_id).identities)
        try:
            g = opt.step(grads)
        except FloatingPointError as err:
            raise FitError(f"diverged at iteration {it}: {err}") from err
        if callback is not None:
            callback(it, {"total": value, **parts, "view": it % k})
    return g


# ---------------------------------------------------------------------------
# removal and initialization
# ---------------------------------------------------------------------------

def infer_object_label(gaussians: Gaussians, dataset: Dataset) -> int:
    """Most frequent non-background label under the object masks."""
    votes = np.zeros(gaussians.identities.shape[1] if len(gaussians) else 16, dtype=np.int64)
    for view in dataset.views:
        if not view.mask.any():
            continue
        labels = view.labels if view.labels is not None else render(gaussians, view.pose).labels
        votes += np.bincount(labels[view.mask].ravel(), minlength=len(votes))[:len(votes)]
    votes[BACKGROUND_LABEL] = 0
    if votes.sum() == 0:
        raise RefineError("cannot infer the object label: no labelled pixels inside the masks")
    return int(np.argmax(votes))


def delete_label(gaussians: Gaussians, label: int) -> tuple[Gaussians, np.ndarray]:
    hit = gaussians.labels() == label
    if not hit.any():
        raise RefineError(f"no gaussians with label {label}")
    return gaussians.subset(~hit), hit


def _nearest(tree_points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points; equal distances resolve to the lower index."""
    extra = min(len(tree_points), k + 8)
    d, idx = cKDTree(tree_points).query(queries, k=extra)
    d = np.atleast_2d(d.reshape(len(queries), -1))
    idx = np.atleast_2d(idx.reshape(len(queries), -1))
    order = np.lexsort((idx, d), axis=-1)
    return np.take_along_axis(idx, order, axis=1)[:, :k]


def init_new_gaussians(cloud: ColoredPointCloud, count: int, remaining: Gaussians,
                       rng: np.random.Generator) -> Gaussians:
    """Replacement Gaussians at points of P_1, shaped like their 5 nearest remaining neighbours."""
    if len(cloud) == 0:
        raise RefineError("P_1 is empty: nothing to initialize replacement Gaussians from")
    if len(remaining) == 0:
        raise RefineError("no remaining gaussians to borrow shape parameters from")
    if count == 0:
        return Gaussians.empty()
    pick = rng.choice(len(cloud), size=count, replace=len(cloud) < count)
    pos = cloud.points[pick]
    nb = _nearest(remaining.positions, pos, min(KNN, len(remaining)))
    quats = remaining.rotations[nb]
    # the same rotation has two signs; align to the first neighbour before averaging
    sign = np.sign(np.sum(quats * quats[:, :1], axis=-1, keepdims=True))
    sign[sign == 0] = 1.0
    q = np.mean(quats * sign, axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Gaussians(
        positions=pos,
        scales=remaining.scales[nb].mean(axis=1),
        rotations=q,
        opacities=remaining.opacities[nb].mean(axis=1),
        colors=np.clip(cloud.colors[pick], 0, 1),
        identities=remaining.identities[nb].mean(axis=1),
    )


def select_reference_view(refined: Sequence[np.ndarray]) -> int:
    if len(refined) == 0:
        raise ValueError("no views")
    areas = np.array([int(np.count_nonzero(m)) for m in refined])
    if areas.max() == 0:
        raise NothingToInpaint("all refined masks are empty")
    return int(np.argmax(areas))


def build_supervision(refined: Sequence[np.ndarray], reference: int, inpainted_rgb: np.ndarray,
                      inpainted_depth: np.ndarray, poses: Sequence[CameraPose],
                      renders: Sequence[np.ndarray]) -> tuple[ColoredPointCloud, list[np.ndarray]]:
    """P_1 from the masked inpainted reference view and the composite I^P_k for every view."""
    cloud = proj3d(inpainted_rgb, refined[reference], inpainted_depth, poses[reference])
    out = []
    for k, pose in enumerate(poses):
        target = np.array(renders[k], dtype=np.float64, copy=True)
        hits = proj2d(cloud, pose)
        hits = hits.subset(refined[k][hits.v, hits.u])
        target[hits.v, hits.u] = hits.colors
        out.append(target)
    return cloud, out


@dataclass
class RemovalResult:
    gaussians: Gaussians  # remaining followed by the replacements
    remaining_count: int
    removed_count: int
    reference: int
    cloud: ColoredPointCloud
    supervision: list[np.ndarray]
    inpainted: InpaintResult
    refined: tuple[np.ndarray, ...]
    label: int

    @property
    def trainable(self) -> np.ndarray:
        t = np.zeros(len(self.gaussians), bool)
        t[self.remaining_count:] = True
        return t


def _inpaint_reference(g: Gaussians, dataset: Dataset, refined, ref: int, config: RefineConfig):
    frame = render(g, dataset.views[ref].pose, identity=False, coverage_floor=config.coverage_floor)
    view = dataset.views[ref]
    truth = None
    if config.inpainter == "oracle":
        if view.gt_removed is None or view.gt_removed_depth is None:
            raise RefineError("oracle inpainter needs gt_removed images and depths in the dataset")
        truth = (view.gt_removed, view.gt_removed_depth)
    req = InpaintRequest(frame.rgb, frame.depth, np.asarray(refined[ref], bool))
    return inpaint(req, config.inpainter, truth=truth, exchange_dir=config.exchange_dir,
                   timeout=config.external_timeout, command=config.external_command)


def remove_object(gaussians: Gaussians, label: int, dataset: Dataset, masks: MaskSet | Sequence[np.ndarray],
                  config: RefineConfig = RefineConfig()) -> RemovalResult:
    """Delete the object's Gaussians, inpaint the reference view and seed the replacements."""
    refined = tuple(np.asarray(m, bool) for m in (masks.refined if isinstance(masks, MaskSet) else masks))
    remaining, hit = delete_label(gaussians, label)
    removed = int(hit.sum())
    ref = select_reference_view(refined)
    result = _inpaint_reference(remaining, dataset, refined, ref, config)
    renders = [render(remaining, v.pose, identity=False, coverage_floor=config.coverage_floor).rgb
               for v in dataset.views]
    cloud, supervision = build_supervision(refined, ref, result.image, result.depth, dataset.poses, renders)
    rng = np.random.default_rng(config.seed)
    new = init_new_gaussians(cloud, removed, remaining, rng)
    return RemovalResult(Gaussians.concat([remaining, new]), len(remaining), removed, ref, cloud,
                         supervision, result, refined, label)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

METRIC_FIELDS = ["iteration", "view", "l1", "ssim", "rgb", "depth", "cross", "total",
                 "cross_frozen", "inpaint_frozen", "cross_last_targets", "inpaint_last_targets"]


class _MetricsLog:
    def __init__(self, path: Path | None):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
            self._writer.writeheader()

    @staticmethod
    def _fmt(row: dict) -> dict:
        return {k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()}

    def add(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in METRIC_FIELDS}
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(self._fmt(row))
            self._fh.flush()

    def rewrite(self) -> None:
        """Write every row again, after earlier rows were amended."""
        if self._fh is not None:
            self._fh.seek(0)
            self._fh.truncate()
            self._writer.writeheader()
            self._writer.writerows(self._fmt(r) for r in self.rows)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class RefineOutcome:
    gaussians: Gaussians
    metrics: list[dict] = field(default_factory=list)
    reinpaints: int = 0


def _reference_terms(frame_view, target_rgb, target_depth, config: RefineConfig):
    l1, g1 = losses.l1_with_grad(frame_view.rgb, target_rgb)
    s, gs = losses.ssim_with_grad(frame_view.rgb, target_rgb)
    try:
        d, gd = losses.l_depth_with_grad(frame_view.depth, target_depth)
    except losses.LossError:
        d, gd = 0.0, np.zeros_like(frame_view.depth)
    return {"l1": l1, "ssim": s, "rgb": l1 + 1 - s, "depth": d}, g1 - gs, config.depth_weight * gd


def frozen_losses(g: Gaussians, dataset: Dataset, reference: int, inpainted: InpaintResult,
                  supervision: Sequence[np.ndarray], refined, config: RefineConfig) -> tuple[float, float]:
    """``(L_cross summed over all non-reference views, L_inpaint)`` against fixed targets."""
    proxy = losses.perceptual_proxy(config.perceptual_seed)
    ref_view = render(g, dataset.views[reference].pose, identity=False, coverage_floor=config.coverage_floor)
    terms, _, _ = _reference_terms(ref_view, inpainted.image, inpainted.depth, config)
    cross = 0.0
    for k, view in enumerate(dataset.views):
        if k == reference:
            continue
        cross += proxy.distance(render(g, view.pose, identity=False).rgb, supervision[k])
    total = terms["rgb"] + config.depth_weight * terms["depth"] + config.cross_weight * cross
    return cross, total


def refine(removal: RemovalResult, dataset: Dataset, config: RefineConfig = RefineConfig(),
           out_dir=None) -> RefineOutcome:
    """Optimize the replacement Gaussians so every view agrees with the inpainted reference."""
    out = Path(out_dir) if out_dir is not None else None
    metrics = _MetricsLog(out / "metrics.csv" if out is not None else None)
    g = removal.gaussians
    if config.iterations == 0:
        metrics.close()
        return RefineOutcome(g, metrics.rows)
    trainable = removal.trainable if config.freeze else None
    opt = GaussianAdam(g, config.rates, trainable=trainable, position_scale=dataset.camera_extent(),
                       train_identity=False, total_steps=config.iterations)
    ref = removal.reference
    refined = removal.refined
    others = [k for k in range(len(dataset)) if k != ref]
    proxy = losses.perceptual_proxy(config.perceptual_seed)
    inpainted = removal.inpainted
    supervision = removal.supervision
    frozen = (inpainted, list(supervision))
    reinpaints = 0

    def log_frozen(it: int, row: dict) -> None:
        c, t = frozen_losses(g, dataset, ref, frozen[0], frozen[1], refined, config)
        row["cross_frozen"], row["inpaint_frozen"] = c, t

    try:
        for it in range(config.iterations + 1):
            if 0 < it < config.iterations and it % config.reinpaint_period == 0:
                inpainted = _inpaint_reference(g, dataset, refined, ref, config)
                renders = [render(g, v.pose, identity=False, coverage_floor=config.coverage_floor).rgb
                           for v in dataset.views]
                _, supervision = build_supervision(refined, ref, inpainted.image, inpainted.depth,
                                                   dataset.poses, renders)
                reinpaints += 1
            frame = Frame(g, dataset.views[ref].pose, identity=False, coverage_floor=config.coverage_floor)
            terms, g_rgb, g_depth = _reference_terms(frame.view, inpainted.image, inpainted.depth, config)
            row = {"iteration": it, **terms}
            total = terms["rgb"] + config.depth_weight * terms["depth"]
            cross_frame = None
            if others:
                k = others[it % len(others)]
                cross_frame = Frame(g, dataset.views[k].pose, identity=False, coverage_floor=config.coverage_floor)
                c, g_c = proxy.distance_with_grad(cross_frame.view.rgb, supervision[k])
                g_c = config.cross_weight * g_c * refined[k][..., None]
                row["view"] = k
                row["cross"] = c
                total += config.cross_weight * c
            row["total"] = total
            if not all(math.isfinite(float(v)) for v in terms.values()) or not math.isfinite(total):
                dump = {"iteration": it, **{k: float(v) for k, v in row.items() if k != "view"}}
                if out is not None:
                    (out / "diagnostics.json").write_text(json.dumps(dump, indent=1))
                raise RefineError(f"non-finite loss at iteration {it}: {dump}")
            if it == 0 or it == config.iterations or (config.frozen_eval_every and it % config.frozen_eval_every == 0):
                log_frozen(it, row)
            metrics.add(row)
            if it == config.iterations:
                # score the starting and final scenes against the targets in force at the end
                for r, scene in ((metrics.rows[0], removal.gaussians), (metrics.rows[-1], g)):
                    r["cross_last_targets"], r["inpaint_last_targets"] = frozen_losses(
                        scene, dataset, ref, inpainted, supervision, refined, config)
                metrics.rewrite()
                break
            grads = frame.backward(grad_rgb=g_rgb, grad_depth=g_depth, trainable=trainable)
            if cross_frame is not None:
                grads = grads + cross_frame.backward(grad_rgb=g_c, trainable=trainable)
            try:
                g = opt.step(grads)
            except FloatingPointError as err:
                raise RefineError(f"diverged at iteration {it}: {err}") from err
            step = it + 1
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_gaussians(g, out / f"ckpt_{step:05d}.gsip")
    finally:
        metrics.close()
    if out is not None:
        save_gaussians(g, out / "refined.gsip")
    return RefineOutcome(g, metrics.rows, reinpaints)
