"""Closed-form Johnson S_U quantile fit (Slifker & Shapiro) used as the shape warm start."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .normalizers import ShapeParams
from .series import DataError, MultiSeries, SplitSpec, split_values

FAMILY_TOL = 1e-6
DEFAULT_Z = 0.524
FALLBACK = (1.0, 0.0)

__all__ = [
    "FAMILY_TOL",
    "DEFAULT_Z",
    "QuantileQuad",
    "FitResult",
    "WarmStart",
    "empirical_quantile",
    "quantile_quad",
    "fit_quad",
    "slifker_shapiro_fit",
    "clamp_shape",
    "warm_start",
]


@dataclass(frozen=True)
class QuantileQuad:
    x_m3z: float
    x_m1z: float
    x_p1z: float
    x_p3z: float

    @property
    def m(self) -> float:
        return self.x_p3z - self.x_p1z

    @property
    def n(self) -> float:
        return self.x_m1z - self.x_m3z

    @property
    def p(self) -> float:
        return self.x_p1z - self.x_m1z


@dataclass(frozen=True)
class FitResult:
    family: str  # "SU", "SB" or "SL"
    shape: Optional[tuple]  # (delta, epsilon) for SU only
    loc_scale_hint: Optional[tuple]  # (loc, scale) for SU only
    ratio: float
    z_used: float
    quad: QuantileQuad
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "delta": None if self.shape is None else self.shape[0],
            "epsilon": None if self.shape is None else self.shape[1],
            "loc": None if self.loc_scale_hint is None else self.loc_scale_hint[0],
            "scale": None if self.loc_scale_hint is None else self.loc_scale_hint[1],
            "ratio": self.ratio,
            "z_used": self.z_used,
            "degenerate": self.degenerate,
        }


def empirical_quantile(sample, q: float) -> float:
    """Linear interpolation between order statistics (position ``(n - 1) q``)."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    s = np.asarray(sample, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("need at least 2 values")
    return float(np.quantile(s, q, method="linear"))


def quantile_quad(sample, z: float) -> QuantileQuad:
    s = np.asarray(sample, dtype=np.float64).ravel()
    probs = ndtr(np.array([-3.0 * z, -z, z, 3.0 * z]))
    qs = np.quantile(s, probs, method="linear")
    return QuantileQuad(*(float(v) for v in qs))


def slifker_shapiro_fit(sample, z: float = DEFAULT_Z) -> FitResult:
    """Classify the sample into a Johnson family and, for S_U, fit it in closed form.

    Uses the four quantiles at Phi(-3z), Phi(-z), Phi(z), Phi(3z). The
    classification statistic is ``m n / p**2`` (> 1: S_U, < 1: S_B, else S_L).
    When the S_U formulas are undefined the result is flagged ``degenerate``
    and carries the fallback shape (1, 0).
    """
    s = np.asarray(sample, dtype=np.float64).ravel()
    if s.size < 20:
        raise ValueError(f"need at least 20 values for a quantile fit, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("sample contains non-finite values")
    if not 0.0 < z <= 1.2:
        raise ValueError(f"z must lie in (0, 1.2], got {z}")

    return fit_quad(quantile_quad(s, z), z)


def fit_quad(quad: QuantileQuad, z: float) -> FitResult:
    """Family classification and S_U estimates from four quantiles."""
    m, n, p = quad.m, quad.n, quad.p
    if p <= 0.0:
        return FitResult("SL", FALLBACK, None, float("nan"), z, quad, degenerate=True)

    mp, np_ = m / p, n / p
    ratio = mp * np_
    if ratio < 1.0 - FAMILY_TOL:
        return FitResult("SB", None, None, ratio, z, quad)
    if ratio <= 1.0 + FAMILY_TOL:
        return FitResult("SL", None, None, ratio, z, quad)
    if mp + np_ <= 2.0:
        return FitResult("SU", FALLBACK, None, ratio, z, quad, degenerate=True)

    root = np.sqrt(ratio - 1.0)
    delta = 2.0 * z / np.arccosh(0.5 * (mp + np_))
    epsilon = delta * np.arcsinh((np_ - mp) / (2.0 * root))
    scale = 2.0 * p * root / ((mp + np_ - 2.0) * np.sqrt(mp + np_ + 2.0))
    loc = 0.5 * (quad.x_p1z + quad.x_m1z) + p * (np_ - mp) / (2.0 * (mp + np_ - 2.0))
    return FitResult("SU", (float(delta), float(epsilon)), (float(loc), float(scale)), ratio, z, quad)


def clamp_shape(delta: float, epsilon: float, delta_bounds=(0.8, 5.0), eps_bounds=(-1.0, 1.0)):
    return (
        float(np.clip(delta, *delta_bounds)),
        float(np.clip(epsilon, *eps_bounds)),
    )


@dataclass(frozen=True)
class WarmStart:
    shape: ShapeParams
    fits: tuple  # one FitResult per channel (per-channel mode) or a single pooled fit
    fallback: tuple  # bool per fit
    channels: tuple = field(default=())

    def report(self) -> dict:
        return {
            "mode": "shared" if self.shape.shared else "per-channel",
            "fits": [dict(f.to_dict(), fallback=bool(fb)) for f, fb in zip(self.fits, self.fallback)],
            "channels": list(self.channels),
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def _robust_standardize(col: np.ndarray) -> np.ndarray:
    med = np.median(col)
    mad = np.median(np.abs(col - med))
    return (col - med) / (mad if mad >= 1e-8 else 1.0)


def _resolve(fit: FitResult, delta_bounds, eps_bounds):
    if fit.family != "SU" or fit.degenerate:
        return FALLBACK, True
    return clamp_shape(*fit.shape, delta_bounds, eps_bounds), False


def warm_start(
    series: MultiSeries,
    split: SplitSpec = SplitSpec(),
    mode: str = "shared",
    z: float = DEFAULT_Z,
    delta_bounds=(0.8, 5.0),
    eps_bounds=(-1.0, 1.0),
) -> WarmStart:
    """Fit the train split and return a shape clamped into the search box.

    Channels (or the pooled sample) that do not classify as S_U fall back to
    ``(1, 0)`` and are flagged; fitting never aborts the pipeline.
    """
    train = split_values(series, split, "train")
    if train.shape[0] == 0:
        raise DataError("train split is empty")
    C = series.n_channels

    if mode == "per-channel":
        fits, resolved, flags = [], [], []
        for c in range(C):
            fit = _safe_fit(train[:, c], z)
            pair, fb = _resolve(fit, delta_bounds, eps_bounds)
            fits.append(fit)
            resolved.append(pair)
            flags.append(fb)
        shape = ShapeParams(np.array([r[0] for r in resolved]), np.array([r[1] for r in resolved]), shared=False)
        return WarmStart(shape, tuple(fits), tuple(flags), series.channel_names)
    if mode == "shared":
        pooled = np.concatenate([_robust_standardize(train[:, c]) for c in range(C)])
        fit = _safe_fit(pooled, z)
        (d, e), fb = _resolve(fit, delta_bounds, eps_bounds)
        return WarmStart(ShapeParams.uniform(d, e, C), (fit,), (fb,), series.channel_names)
    raise ValueError(f"mode must be 'shared' or 'per-channel', got {mode!r}")


def _safe_fit(sample, z) -> FitResult:
    try:
        return slifker_shapiro_fit(sample, z)
    except ValueError:
        # too few points or an unusable sample: report as a degenerate SL fit
        quad = QuantileQuad(*([float("nan")] * 4))
        return FitResult("SL", FALLBACK, None, float("nan"), z, quad, degenerate=True)
