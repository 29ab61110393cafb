"""Tree-structured Parzen Estimator over the (delta, epsilon) box, seeded at the warm start."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .backbone import TrainConfig, TrainingError, train
from .normalizers import ShapeParams
from .series import MultiSeries, SplitSpec

FAILED_SENTINEL = 1e300
HPO_SEED = 42

__all__ = [
    "SearchSpace",
    "TpeConfig",
    "TrialRecord",
    "SearchResult",
    "SearchError",
    "parzen_log_density",
    "propose",
    "evaluate_trial",
    "run_tpe",
    "random_search",
    "search",
    "write_history",
    "read_history",
]


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    delta_lo: float = 0.8
    delta_hi: float = 5.0
    eps_lo: float = -1.0
    eps_hi: float = 1.0
    n_channels: int = 1
    shared: bool = True

    def __post_init__(self):
        if not (self.delta_lo < self.delta_hi and self.eps_lo < self.eps_hi):
            raise ValueError("search space bounds must satisfy lo < hi")
        if self.delta_lo <= 0:
            raise ValueError("delta lower bound must be positive")

    @property
    def dims(self) -> int:
        return 2 if self.shared else 2 * self.n_channels

    def bounds(self):
        k = 1 if self.shared else self.n_channels
        lo = np.array([self.delta_lo] * k + [self.eps_lo] * k)
        hi = np.array([self.delta_hi] * k + [self.eps_hi] * k)
        return lo, hi

    def contains(self, vec) -> bool:
        lo, hi = self.bounds()
        vec = np.asarray(vec)
        return bool(np.all(vec >= lo) and np.all(vec <= hi))

    def clamp(self, shape: ShapeParams) -> ShapeParams:
        lo, hi = self.bounds()
        return ShapeParams.from_vector(np.clip(shape.to_vector(), lo, hi), self.n_channels, self.shared)

    def to_shape(self, vec) -> ShapeParams:
        return ShapeParams.from_vector(vec, self.n_channels, self.shared)

    def boundary_contacts(self, shape: ShapeParams, tol: float = 1e-6) -> dict:
        """Per-axis flags for a point on the box edge (delta at either bound, epsilon at either bound)."""
        return {
            "delta": [bool(abs(d - self.delta_lo) <= tol or abs(d - self.delta_hi) <= tol) for d in shape.delta],
            "epsilon": [bool(abs(e - self.eps_lo) <= tol or abs(e - self.eps_hi) <= tol) for e in shape.epsilon],
        }


@dataclass(frozen=True)
class TpeConfig:
    n_trials: int = 60
    n_startup: int = 10
    gamma_frac: float = 0.25
    n_candidates: int = 24
    seed: int = 0
    bandwidth: str = "scott"
    prior_std_frac: float = 0.25

    def __post_init__(self):
        if self.n_trials < 1 or not (0 < self.n_startup < max(self.n_trials, 2)):
            raise ValueError("need n_trials >= 1 and 0 < n_startup < n_trials")
        if not 0.0 < self.gamma_frac <= 0.5:
            raise ValueError("gamma_frac must lie in (0, 0.5]")
        if self.bandwidth != "scott":
            raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")


@dataclass(frozen=True)
class TrialRecord:
    index: int
    candidate: ShapeParams
    objective: float
    seed: int
    status: str = "complete"
    test_mse: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "delta": [float(v) for v in self.candidate.delta],
            "epsilon": [float(v) for v in self.candidate.epsilon],
            "shared": self.candidate.shared,
            "objective": float(self.objective),
            "seed": self.seed,
            "status": self.status,
            "test_mse": self.test_mse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        shape = ShapeParams(np.asarray(d["delta"]), np.asarray(d["epsilon"]), shared=d["shared"])
        return cls(d["index"], shape, d["objective"], d["seed"], d["status"], d.get("test_mse"))


# --------------------------------------------------------------------------
# Parzen estimators
# --------------------------------------------------------------------------


def _trunc_norm_logpdf(x, mu, sigma, lo, hi):
    mass = ndtr((hi - mu) / sigma) - ndtr((lo - mu) / sigma)
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma * math.sqrt(2 * math.pi) * mass)


def _scott_bandwidth(points, lo, hi):
    # floor shrinks with n but never below 1e-3 of the range; a fixed tiny floor
    # lets a clustered good set collapse the search onto one point
    n = len(points)
    spread = float(np.std(points)) if n > 1 else 0.0
    floor = max(1e-3, 1.0 / min(100, n + 1)) * (hi - lo)
    return max(spread * n ** (-0.2), floor)


@dataclass(frozen=True)
class _Mixture:
    """Equal-weight truncated-Gaussian mixture on one axis, with a prior component."""

    mus: np.ndarray
    sigmas: np.ndarray
    lo: float
    hi: float

    def logpdf(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        comp = _trunc_norm_logpdf(x[:, None], self.mus[None, :], self.sigmas[None, :], self.lo, self.hi)
        mx = comp.max(axis=1, keepdims=True)
        return mx[:, 0] + np.log(np.mean(np.exp(comp - mx), axis=1))

    def sample(self, rng, size):
        which = rng.integers(0, self.mus.size, size)
        return _trunc_normal(rng, self.mus[which], self.sigmas[which], self.lo, self.hi)


def _trunc_normal(rng, mu, sigma, lo, hi):
    """Inverse-CDF sampling from N(mu, sigma) truncated to [lo, hi]."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    a = ndtr((lo - mu) / sigma)
    b = ndtr((hi - mu) / sigma)
    u = rng.uniform(size=mu.shape)
    x = mu + sigma * ndtri(a + u * (b - a))
    return np.clip(x, lo, hi)


def _build_mixture(points, lo, hi, prior_mu, prior_sigma) -> _Mixture:
    points = np.asarray(points, dtype=np.float64)
    bw = _scott_bandwidth(points, lo, hi) if points.size else prior_sigma
    mus = np.append(points, prior_mu)
    sigmas = np.append(np.full(points.size, bw), prior_sigma)
    return _Mixture(mus, sigmas, lo, hi)


def _split_good_bad(history, gamma_frac):
    complete = [t for t in history if t.status == "complete"]
    failed = [t for t in history if t.status != "complete"]
    ranked = sorted(complete, key=lambda t: (t.objective, t.index))
    n_good = min(len(ranked), max(1, math.ceil(gamma_frac * len(ranked)))) if ranked else 0
    return ranked[:n_good], ranked[n_good:] + failed


def _mixtures(history, space: SearchSpace, config: TpeConfig, warm_vec):
    lo, hi = space.bounds()
    prior_sigma = config.prior_std_frac * (hi - lo)
    good, bad = _split_good_bad(history, config.gamma_frac)
    good_pts = np.array([t.candidate.to_vector() for t in good]).reshape(len(good), space.dims)
    bad_pts = np.array([t.candidate.to_vector() for t in bad]).reshape(len(bad), space.dims)
    l_mix = [_build_mixture(good_pts[:, d], lo[d], hi[d], warm_vec[d], prior_sigma[d]) for d in range(space.dims)]
    g_mix = [_build_mixture(bad_pts[:, d], lo[d], hi[d], warm_vec[d], prior_sigma[d]) for d in range(space.dims)]
    return l_mix, g_mix


def parzen_log_density(history, space: SearchSpace, config: TpeConfig, warm_start: ShapeParams, points):
    """Log densities of the good and bad Parzen estimators at ``points`` (shape ``(n, dims)``)."""
    l_mix, g_mix = _mixtures(history, space, config, warm_start.to_vector())
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    log_l = sum(l_mix[d].logpdf(points[:, d]) for d in range(space.dims))
    log_g = sum(g_mix[d].logpdf(points[:, d]) for d in range(space.dims))
    return log_l, log_g


def propose(history, space: SearchSpace, config: TpeConfig, warm_start: ShapeParams) -> ShapeParams:
    """Next candidate given the committed history.

    Trial 0 is the warm start itself, the next ``n_startup - 1`` trials come
    from a truncated normal centred on it, and later trials maximise the
    good/bad density ratio over ``n_candidates`` draws from the good estimator.
    """
    warm_vec = warm_start.to_vector()
    if warm_vec.size != space.dims:
        raise ValueError("warm start does not match the search-space dimension")
    if not space.contains(warm_vec):
        raise ValueError("warm start lies outside the search box; clamp it first")
    n = len(history)
    if n == 0:
        return warm_start
    lo, hi = space.bounds()
    rng = np.random.default_rng([config.seed, n])
    if n < config.n_startup or not any(t.status == "complete" for t in history):
        vec = _trunc_normal(rng, warm_vec, config.prior_std_frac * (hi - lo), lo, hi)
        return space.to_shape(vec)

    l_mix, g_mix = _mixtures(history, space, config, warm_vec)
    cands = np.column_stack([l_mix[d].sample(rng, config.n_candidates) for d in range(space.dims)])
    score = sum(l_mix[d].logpdf(cands[:, d]) - g_mix[d].logpdf(cands[:, d]) for d in range(space.dims))
    return space.to_shape(cands[int(np.argmax(score))])


# --------------------------------------------------------------------------
# search loops
# --------------------------------------------------------------------------


@dataclass
class SearchResult:
    best: ShapeParams
    best_trial: TrialRecord
    history: list
    boundary: dict
    warm_start: ShapeParams

    def best_json(self, channels=None) -> str:
        return self.best.to_json(
            channels,
            boundary_contact=self.boundary,
            objective=float(self.best_trial.objective),
            trial=self.best_trial.index,
        )


def run_tpe(
    objective: Callable[[ShapeParams, int], "float | TrialRecord"],
    space: SearchSpace,
    config: TpeConfig,
    warm_start: ShapeParams,
) -> SearchResult:
    """Synchronous ask/tell loop for ``config.n_trials`` trials.

    ``objective(candidate, index)`` returns either a float or a full
    :class:`TrialRecord`; exceptions and non-finite values mark the trial failed.
    """
    warm_start = space.clamp(warm_start)
    history = []
    for i in range(config.n_trials):
        cand = propose(history, space, config, warm_start)
        history.append(_run_objective(objective, cand, i))
    return _finish(history, space, warm_start)


def random_search(objective, space: SearchSpace, n_trials: int, seed: int) -> SearchResult:
    """Uniform sampling baseline over the box (no warm start)."""
    lo, hi = space.bounds()
    rng = np.random.default_rng(seed)
    history = []
    for i in range(n_trials):
        cand = space.to_shape(rng.uniform(lo, hi))
        history.append(_run_objective(objective, cand, i))
    return _finish(history, space, history[0].candidate)


def _run_objective(objective, cand, index) -> TrialRecord:
    try:
        out = objective(cand, index)
    except (TrainingError, FloatingPointError, ValueError):
        return TrialRecord(index, cand, FAILED_SENTINEL, -1, "failed")
    if isinstance(out, TrialRecord):
        return replace(out, index=index)
    if not np.isfinite(out):
        return TrialRecord(index, cand, FAILED_SENTINEL, -1, "failed")
    return TrialRecord(index, cand, float(out), -1)


def _finish(history, space, warm_start) -> SearchResult:
    complete = [t for t in history if t.status == "complete"]
    if not complete:
        raise SearchError(f"all {len(history)} trials failed")
    best = min(complete, key=lambda t: (t.objective, t.index))
    return SearchResult(best.candidate, best, history, space.boundary_contacts(best.candidate), warm_start)


def evaluate_trial(
    candidate: ShapeParams,
    series: MultiSeries,
    split: SplitSpec,
    train_config: TrainConfig,
    hpo_seed: int = HPO_SEED,
    index: int = 0,
    trial_seeds: int = 1,
) -> TrialRecord:
    """Train with the candidate frozen; the objective is the best validation MSE.

    With ``trial_seeds > 1`` the objective averages runs seeded ``hpo_seed``,
    ``hpo_seed + 1``, ... and any failed run fails the whole trial.
    """
    if trial_seeds < 1:
        raise ValueError("trial_seeds must be at least 1")
    vals, tests = [], []
    for k in range(trial_seeds):
        cfg = replace(train_config, seed=hpo_seed + k, joint_shape_training=False)
        try:
            run = train(series, split, "norin", candidate, cfg)
        except TrainingError:
            return TrialRecord(index, candidate, FAILED_SENTINEL, hpo_seed, "failed")
        if not np.isfinite(run.best_val_mse):
            return TrialRecord(index, candidate, FAILED_SENTINEL, hpo_seed, "failed")
        vals.append(run.best_val_mse)
        tests.append(run.metrics["test"]["mse"])
    if trial_seeds == 1:
        return TrialRecord(index, candidate, vals[0], hpo_seed, "complete", tests[0])
    return TrialRecord(index, candidate, float(np.mean(vals)), hpo_seed, "complete", float(np.mean(tests)))


def search(
    series: MultiSeries,
    split: SplitSpec,
    train_config: TrainConfig,
    tpe_config: TpeConfig = TpeConfig(),
    space: Optional[SearchSpace] = None,
    warm: Optional[ShapeParams] = None,
    hpo_seed: int = HPO_SEED,
    z: float = 0.524,
    trial_seeds: int = 1,
) -> SearchResult:
    """Warm start from the closed-form fit, then TPE over validation MSE."""
    from .shape_fit import warm_start as fit_warm_start

    if space is None:
        space = SearchSpace(n_channels=series.n_channels)
    if space.n_channels != series.n_channels:
        space = replace(space, n_channels=series.n_channels)
    if warm is None:
        mode = "shared" if space.shared else "per-channel"
        warm = fit_warm_start(
            series, split, mode, z, (space.delta_lo, space.delta_hi), (space.eps_lo, space.eps_hi)
        ).shape

    def objective(cand, index):
        return evaluate_trial(cand, series, split, train_config, hpo_seed, index, trial_seeds)

    return run_tpe(objective, space, tpe_config, warm)


def write_history(path, history) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        for t in history:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_history(path) -> list:
    with Path(path).open() as fh:
        return [TrialRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
