"""Reversible instance normalizers: identity, RevIN (affine z-score) and the Johnson S_U map.

Every normalizer follows the same contract: statistics are computed from the
lookback only, the forward map is applied to the lookback, and the inverse
map (with the *same* statistics) is applied to the backbone output.

Arrays are laid out as ``(N, steps, C)``; per-instance statistics are
``(N, C)`` and broadcast over the step axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SCALE_FLOOR = 1e-8

__all__ = [
    "SCALE_FLOOR",
    "ShapeParams",
    "InstanceStats",
    "AffinePost",
    "robust_loc_scale",
    "mean_std_stats",
    "jsu_forward",
    "jsu_inverse",
    "revin_forward",
    "revin_inverse",
    "jsu_shape_grads",
]


@dataclass(frozen=True)
class ShapeParams:
    """Johnson S_U shape pair, one entry per channel.

    In shared mode every channel carries the same ``(delta, epsilon)``.
    """

    delta: np.ndarray
    epsilon: np.ndarray
    shared: bool = True

    def __post_init__(self):
        delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64)).copy()
        epsilon = np.atleast_1d(np.asarray(self.epsilon, dtype=np.float64)).copy()
        if delta.shape != epsilon.shape or delta.ndim != 1:
            raise ValueError("delta and epsilon must be 1-D arrays of equal length")
        if not np.all(np.isfinite(delta)) or not np.all(np.isfinite(epsilon)):
            raise ValueError("shape parameters must be finite")
        if np.any(delta <= 0):
            raise ValueError(f"delta must be positive, got {delta}")
        if self.shared and (np.ptp(delta) != 0 or np.ptp(epsilon) != 0):
            raise ValueError("shared shape parameters must be equal across channels")
        delta.setflags(write=False)
        epsilon.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "epsilon", epsilon)

    @classmethod
    def uniform(cls, delta: float, epsilon: float, n_channels: int) -> "ShapeParams":
        return cls(np.full(n_channels, float(delta)), np.full(n_channels, float(epsilon)), shared=True)

    @property
    def n_channels(self) -> int:
        return self.delta.size

    def to_vector(self) -> np.ndarray:
        """Search-space coordinates: ``[delta, epsilon]`` when shared, else ``[deltas..., epsilons...]``."""
        if self.shared:
            return np.array([self.delta[0], self.epsilon[0]])
        return np.concatenate([self.delta, self.epsilon])

    @classmethod
    def from_vector(cls, vec, n_channels: int, shared: bool) -> "ShapeParams":
        vec = np.asarray(vec, dtype=np.float64)
        if shared:
            return cls.uniform(vec[0], vec[1], n_channels)
        return cls(vec[:n_channels], vec[n_channels:], shared=False)

    def to_dict(self, channels: Optional[Sequence[str]] = None) -> dict:
        if channels is None:
            channels = [f"ch{c}" for c in range(self.n_channels)]
        return {
            "shared": bool(self.shared),
            "delta": [float(v) for v in self.delta],
            "epsilon": [float(v) for v in self.epsilon],
            "channels": list(channels),
        }

    def to_json(self, channels: Optional[Sequence[str]] = None, **extra) -> str:
        doc = self.to_dict(channels)
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ShapeParams":
        return cls(np.asarray(doc["delta"]), np.asarray(doc["epsilon"]), shared=bool(doc["shared"]))

    @classmethod
    def from_json(cls, text: str) -> "ShapeParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class InstanceStats:
    loc: np.ndarray  # (N, C)
    scale: np.ndarray  # (N, C), strictly positive
    kind: str
    degenerate: np.ndarray = field(default=None)  # (N, C) bool, True where the scale floor fired

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.zeros(np.shape(self.loc), dtype=bool))


@dataclass
class AffinePost:
    """RevIN's optional per-channel ``gamma * z + beta`` layer (mutable: trained in place)."""

    gamma: np.ndarray
    beta: np.ndarray
    enabled: bool = False

    @classmethod
    def identity(cls, n_channels: int, enabled: bool = False) -> "AffinePost":
        return cls(np.ones(n_channels), np.zeros(n_channels), enabled)

    def effective(self):
        if not self.enabled:
            return 1.0, 0.0
        return np.asarray(self.gamma, dtype=np.float64), np.asarray(self.beta, dtype=np.float64)


def _floor_scale(scale):
    degenerate = scale < SCALE_FLOOR
    return np.where(degenerate, 1.0, scale), degenerate


def robust_loc_scale(lookbacks) -> InstanceStats:
    """Per-window, per-channel median and raw median absolute deviation."""
    x = np.asarray(lookbacks, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"lookbacks must have shape (N, T, C) with T >= 1, got {x.shape}")
    loc = np.median(x, axis=1)
    mad = np.median(np.abs(x - loc[:, None, :]), axis=1)
    scale, degenerate = _floor_scale(mad)
    return InstanceStats(loc, scale, "robust-median-mad", degenerate)


def mean_std_stats(lookbacks) -> InstanceStats:
    x = np.asarray(lookbacks, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"lookbacks must have shape (N, T, C) with T >= 1, got {x.shape}")
    scale, degenerate = _floor_scale(x.std(axis=1))
    return InstanceStats(x.mean(axis=1), scale, "mean-std", degenerate)


def _loc_scale(stats: InstanceStats, values: np.ndarray):
    loc, scale = np.asarray(stats.loc), np.asarray(stats.scale)
    if np.any(scale <= 0):
        raise ValueError("instance scale must be positive")
    if values.ndim == 3:
        return loc[:, None, :], scale[:, None, :]
    return loc, scale


def _shape_arrays(shape: ShapeParams):
    delta, eps = shape.delta, shape.epsilon
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    return delta, eps


def jsu_forward(x, stats: InstanceStats, shape: ShapeParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    loc, scale = _loc_scale(stats, x)
    delta, eps = _shape_arrays(shape)
    return eps + delta * np.arcsinh((x - loc) / scale)


def jsu_inverse(z, stats: InstanceStats, shape: ShapeParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    loc, scale = _loc_scale(stats, z)
    delta, eps = _shape_arrays(shape)
    return loc + scale * np.sinh((z - eps) / delta)


def _check_post(post: Optional[AffinePost]):
    if post is None or not post.enabled:
        return 1.0, 0.0
    gamma, beta = post.effective()
    if np.any(gamma == 0):
        raise ValueError("RevIN gamma must be nonzero when the affine post-layer is enabled")
    return gamma, beta


def revin_forward(x, stats: InstanceStats, post: Optional[AffinePost] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    loc, scale = _loc_scale(stats, x)
    gamma, beta = _check_post(post)
    return gamma * (x - loc) / scale + beta


def revin_inverse(z, stats: InstanceStats, post: Optional[AffinePost] = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    loc, scale = _loc_scale(stats, z)
    gamma, beta = _check_post(post)
    return (z - beta) / gamma * scale + loc


def jsu_shape_grads(values, stats: InstanceStats, shape: ShapeParams, direction: str = "forward") -> dict:
    """Elementwise partial derivatives of the Johnson S_U maps.

    ``direction="forward"`` treats ``values`` as raw inputs ``x`` and returns
    ``dz/d_delta``, ``dz/d_epsilon`` and ``dz/dx``. ``direction="inverse"``
    treats ``values`` as normalized ``z`` and returns ``dx/d_delta``,
    ``dx/d_epsilon`` and ``dx/dz``. Keys are ``"delta"``, ``"epsilon"`` and
    ``"input"`` in both cases.
    """
    v = np.asarray(values, dtype=np.float64)
    loc, scale = _loc_scale(stats, v)
    delta, eps = _shape_arrays(shape)
    if direction == "forward":
        u = (v - loc) / scale
        return {
            "delta": np.arcsinh(u),
            "epsilon": np.ones_like(u),
            "input": delta / (scale * np.sqrt(u * u + 1.0)),
        }
    if direction == "inverse":
        w = (v - eps) / delta
        c = scale * np.cosh(w)
        return {
            "delta": -c * (v - eps) / delta**2,
            "epsilon": -c / delta * np.ones_like(w),
            "input": c / delta,
        }
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
