"""Scalar objectives and their per-pixel adjoints.

Every ``*_with_grad`` function returns ``(value, gradient w.r.t. its first argument)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_LAMBDA = 0.2


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    """Total, named components and the adjoints handed to the renderer."""

    total: float = 0.0
    components: dict[str, float] = field(default_factory=dict)
    grad_rgb: np.ndarray | None = None
    grad_depth: np.ndarray | None = None
    grad_identity: np.ndarray | None = None

    def add(self, name: str, value: float, *, rgb=None, depth=None, identity=None) -> None:
        if not math.isfinite(value):
            raise LossError(f"non-finite loss component {name!r}")
        self.components[name] = self.components.get(name, 0.0) + value
        self.total += value
        for attr, g in (("grad_rgb", rgb), ("grad_depth", depth), ("grad_identity", identity)):
            if g is not None:
                cur = getattr(self, attr)
                setattr(self, attr, g.copy() if cur is None else cur + g)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LossError(f"resolution mismatch: {a.shape} vs {b.shape}")


def _window(x: np.ndarray) -> np.ndarray:
    sigma = (SSIM_SIGMA, SSIM_SIGMA) + (0,) * (x.ndim - 2)
    return ndimage.gaussian_filter(x, sigma=sigma, mode="constant", cval=0.0,
                                   truncate=SSIM_RADIUS / SSIM_SIGMA)


def _as3(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


# ---------------------------------------------------------------------------
# L1 / SSIM / image losses
# ---------------------------------------------------------------------------

def l1_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    _check_same(a, b)
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM (11x11 Gaussian window, sigma 1.5, zero padding) per pixel and channel."""
    a, b = _as3(a), _as3(b)
    _check_same(a, b)
    mu_a, mu_b = _window(a), _window(b)
    var_a = _window(a * a) - mu_a ** 2
    var_b = _window(b * b) - mu_b ** 2
    cov = _window(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(ssim_map(a, b)))


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    shape = np.shape(a)
    a, b = _as3(a), _as3(b)
    _check_same(a, b)
    mu_a, mu_b = _window(a), _window(b)
    s_aa, s_bb, s_ab = _window(a * a), _window(b * b), _window(a * b)
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * (s_ab - mu_a * mu_b) + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = (s_aa - mu_a ** 2) + (s_bb - mu_b ** 2) + SSIM_C2
    den = d1 * d2
    smap = n1 * n2 / den
    scale = 1.0 / smap.size
    g_mu = scale * ((2 * mu_b * n2 - 2 * mu_b * n1) / den - smap * 2 * mu_a / d1 + smap * 2 * mu_a / d2)
    g_aa = scale * (-smap / d2)
    g_ab = scale * (2 * n1 / den)
    # the zero-padded symmetric window is self-adjoint
    grad = _window(g_mu) + 2 * a * _window(g_aa) + b * _window(g_ab)
    return float(np.mean(smap)), grad.reshape(shape)


def l_image_with_grad(rendered: np.ndarray, target: np.ndarray, lam: float = DEFAULT_LAMBDA,
                      variant: str = "literal") -> tuple[float, np.ndarray]:
    """Photometric loss ``lam * L1 + (1 - SSIM)``; ``variant="3dgs"`` gives ``(1-lam) L1 + lam (1-SSIM)``."""
    l1, g1 = l1_with_grad(rendered, target)
    s, gs = ssim_with_grad(rendered, target)
    if variant == "literal":
        w1, ws = lam, 1.0
    elif variant == "3dgs":
        w1, ws = 1.0 - lam, lam
    else:
        raise LossError(f"unknown loss variant {variant!r}")
    return w1 * l1 + ws * (1.0 - s), w1 * g1 - ws * gs


def l_image(rendered, target, lam: float = DEFAULT_LAMBDA, variant: str = "literal") -> float:
    return l_image_with_grad(rendered, target, lam, variant)[0]


def l_rgb_with_grad(rendered: np.ndarray, inpainted: np.ndarray) -> tuple[float, np.ndarray]:
    """``|I' - I_in|_1 + (1 - SSIM)`` for the reference view."""
    l1, g1 = l1_with_grad(rendered, inpainted)
    s, gs = ssim_with_grad(rendered, inpainted)
    return l1 + 1.0 - s, g1 - gs


def l_depth_with_grad(depth: np.ndarray, inpainted_depth: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute depth error over pixels where both maps hold a surface."""
    _check_same(depth, inpainted_depth)
    valid = (depth > 0) & (inpainted_depth > 0)
    n = int(valid.sum())
    if n == 0:
        raise LossError("no valid depth overlap")
    diff = np.where(valid, depth - inpainted_depth, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def identity_ce_with_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel softmax cross-entropy of composited identity logits against label ids."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise LossError(f"label map {labels.shape} does not match logits {logits.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise LossError("labels out of range")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    n = labels.size
    value = float(np.mean(lse - picked))
    prob = np.exp(shifted - lse[..., None])
    np.put_along_axis(prob, labels[..., None], np.take_along_axis(prob, labels[..., None], axis=-1) - 1.0, axis=-1)
    return value, prob / n


# ---------------------------------------------------------------------------
# perceptual proxy
# ---------------------------------------------------------------------------

def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(np.pad(x, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(np.pad(g, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
    return np.tensordot(w[:, :, ::-1, ::-1], win, axes=([0, 2, 3], [0, 3, 4]))


def _pool(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def _unpool(g: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros(shape)
    h2, w2 = g.shape[1:]
    out[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    return out


class PerceptualProxy:
    """Frozen random multi-scale conv features compared LPIPS-style.

    Three scales of ``3x3 conv -> tanh`` (2x average pooling between scales);
    features are unit-normalized across channels per pixel, and the distance is the
    per-scale spatial mean of squared feature differences, summed over scales.
    """

    def __init__(self, seed: int = 0, width: int = 16, scales: int = 3, eps: float = 1e-6):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.eps = eps
        self.weights = []
        self.biases = []
        c_in = 3
        for _ in range(scales):
            self.weights.append(rng.normal(size=(width, c_in, 3, 3)) / math.sqrt(9 * c_in))
            self.biases.append(0.1 * rng.normal(size=width))
            c_in = width

    def _forward(self, image: np.ndarray):
        x = 2.0 * np.moveaxis(np.asarray(image, dtype=np.float64), -1, 0) - 1.0
        cache = []
        feats = []
        for s, (w, b) in enumerate(zip(self.weights, self.biases)):
            if s > 0:
                prev_shape = x.shape
                x = _pool(x)
            else:
                prev_shape = None
            act = np.tanh(_conv(x, w) + b[:, None, None])
            norm = np.sqrt(np.sum(act * act, axis=0) + self.eps)
            n = act / norm
            feats.append(n)
            cache.append((act, norm, n, prev_shape))
            x = act
        return feats, cache

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        return self._forward(image)[0]

    def distance(self, a: np.ndarray, b: np.ndarray, b_features: list[np.ndarray] | None = None) -> float:
        _check_same(np.asarray(a), np.asarray(b) if b_features is None else np.asarray(a))
        fa = self.features(a)
        fb = self.features(b) if b_features is None else b_features
        return float(sum(np.sum((x - y) ** 2) / (x.shape[1] * x.shape[2]) for x, y in zip(fa, fb)))

    def distance_with_grad(self, a: np.ndarray, b: np.ndarray | None = None,
                           b_features: list[np.ndarray] | None = None) -> tuple[float, np.ndarray]:
        if b_features is None:
            _check_same(np.asarray(a), np.asarray(b))
            b_features = self.features(b)
        fa, cache = self._forward(a)
        value = 0.0
        g_next = None
        for s in range(len(fa) - 1, -1, -1):
            act, norm, n, prev_shape = cache[s]
            hw = n.shape[1] * n.shape[2]
            diff = n - b_features[s]
            value += float(np.sum(diff * diff) / hw)
            g_n = 2.0 * diff / hw
            g_act = (g_n - n * np.sum(g_n * n, axis=0)) / norm
            if g_next is not None:
                g_act = g_act + g_next
            g_pre = g_act * (1.0 - act * act)
            g_in = _conv_input_grad(g_pre, self.weights[s])
            g_next = _unpool(g_in, prev_shape) if prev_shape is not None else g_in
        grad = 2.0 * np.moveaxis(g_next, 0, -1)
        return value, grad


@lru_cache(maxsize=8)
def perceptual_proxy(seed: int = 0) -> PerceptualProxy:
    return PerceptualProxy(seed)


def perceptual_distance(a: np.ndarray, b: np.ndarray, seed: int = 0) -> float:
    return perceptual_proxy(seed).distance(a, b)


def l_cross_with_grad(renders, supervision, masks=None, seed: int = 0):
    """Sum of perceptual distances between renders and their projected supervision.

    Returns ``(value, [grad per view])``. When ``masks`` are given the adjoints are
    confined to them (the supervision differs from the render only there).
    """
    if len(renders) != len(supervision):
        raise LossError("renders and supervision differ in length")
    proxy = perceptual_proxy(seed)
    total = 0.0
    grads = []
    for k, (r, t) in enumerate(zip(renders, supervision)):
        v, g = proxy.distance_with_grad(r, t)
        total += v
        if masks is not None:
            g = g * np.asarray(masks[k], dtype=bool)[..., None]
        grads.append(g)
    return total, grads


def l_cross(renders, supervision, seed: int = 0) -> float:
    proxy = perceptual_proxy(seed)
    return float(sum(proxy.distance(r, t) for r, t in zip(renders, supervision)))
