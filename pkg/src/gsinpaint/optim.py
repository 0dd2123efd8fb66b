"""Adam over Gaussian parameters, stepped in an unconstrained parameterization.

Scales are optimized as logs, opacities as logits and quaternions as raw
4-vectors that are renormalized after every step; colors are clamped to [0, 1].
Only the rows selected by ``trainable`` are ever written back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .render import SplatGradients
from .scene import Gaussians

OPACITY_EPS = 1e-6


@dataclass(frozen=True)
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6  # exponential decay target over the run
    color: float = 2.5e-3
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3
    identity: float = 2.5e-3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearningRates":
        return cls(**d)


def position_lr(rates: LearningRates, step: int, total: int) -> float:
    """Log-linear interpolation from ``position`` to ``position_final`` over ``total`` steps."""
    if total <= 1 or rates.position_final <= 0 or rates.position <= 0:
        return rates.position
    t = min(max(step / (total - 1), 0.0), 1.0)
    return math.exp((1 - t) * math.log(rates.position) + t * math.log(rates.position_final))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, OPACITY_EPS, 1 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GaussianAdam:
    """Adam (beta 0.9/0.999, eps 1e-8) with one learning rate per parameter group."""

    GROUPS = ("positions", "scales", "rotations", "opacities", "colors", "identities")

    def __init__(self, gaussians: Gaussians, rates: LearningRates = LearningRates(),
                 trainable: np.ndarray | None = None, position_scale: float = 1.0,
                 train_identity: bool = True, total_steps: int = 0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        n = len(gaussians)
        self.index = np.arange(n) if trainable is None else np.nonzero(np.asarray(trainable, bool))[0]
        self.base = gaussians
        self.rates = rates
        self.position_scale = position_scale
        self.train_identity = train_identity
        self.total_steps = total_steps
        self.betas = betas
        self.eps = eps
        self.t = 0
        sub = gaussians.subset(self.index)
        q = sub.rotations / np.linalg.norm(sub.rotations, axis=1, keepdims=True)
        self.raw = {
            "positions": sub.positions.copy(),
            "scales": np.log(sub.scales),
            "rotations": q,
            "opacities": _logit(sub.opacities),
            "colors": sub.colors.copy(),
            "identities": sub.identities.copy(),
        }
        self.m = {k: np.zeros_like(v) for k, v in self.raw.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.raw.items()}
        self._current = gaussians

    @property
    def gaussians(self) -> Gaussians:
        return self._current

    def _materialize(self) -> Gaussians:
        g = self.base
        if len(self.index) == 0:
            return g
        fields = {
            "positions": self.raw["positions"], "scales": np.exp(self.raw["scales"]),
            "rotations": self.raw["rotations"], "opacities": _sigmoid(self.raw["opacities"]),
            "colors": self.raw["colors"], "identities": self.raw["identities"],
        }
        out = {}
        for name, value in fields.items():
            arr = getattr(g, name).copy()
            arr[self.index] = value
            out[name] = arr
        return Gaussians(**out)

    def _lr(self, group: str) -> float:
        r = self.rates
        if group == "positions":
            return position_lr(r, self.t, self.total_steps) * self.position_scale
        return {"scales": r.scale, "rotations": r.rotation, "opacities": r.opacity,
                "colors": r.color, "identities": r.identity if self.train_identity else 0.0}[group]

    def step(self, grads: SplatGradients) -> Gaussians:
        idx = self.index
        cur = self._current
        raw_grads = {
            "positions": grads.positions[idx],
            "scales": grads.scales[idx] * cur.scales[idx],
            "rotations": grads.rotations[idx],
            "opacities": grads.opacities[idx] * cur.opacities[idx] * (1 - cur.opacities[idx]),
            "colors": grads.colors[idx],
            "identities": grads.identities[idx],
        }
        for name, g in raw_grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name in self.GROUPS:
            lr = self._lr(name)
            if lr == 0.0:
                continue
            g = raw_grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            self.raw[name] = self.raw[name] - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
        q = self.raw["rotations"]
        self.raw["rotations"] = q / np.linalg.norm(q, axis=1, keepdims=True)
        np.clip(self.raw["colors"], 0.0, 1.0, out=self.raw["colors"])
        self._current = self._materialize()
        return self._current
