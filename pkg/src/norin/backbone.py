"""Small numpy forecasting backbone with hand-written gradients, AdamW, and the training loop.

The forecast for a lookback ``x`` is ``inverse(f(forward(x)); s(x))`` where
``s(x)`` are the lookback's instance statistics, and the loss is MSE in the
original (denormalized) space.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .normalizers import (
    AffinePost,
    InstanceStats,
    ShapeParams,
    jsu_forward,
    jsu_inverse,
    mean_std_stats,
    revin_forward,
    revin_inverse,
    robust_loc_scale,
)
from .series import MultiSeries, SplitSpec, WindowBatch, make_windows

NORMALIZER_KINDS = ("none", "revin", "norin")
DELTA_MIN = 1e-3

__all__ = [
    "NORMALIZER_KINDS",
    "TrainingError",
    "LinearBackbone",
    "MLPBackbone",
    "Normalizer",
    "TrainConfig",
    "RunResult",
    "init_backbone",
    "forward",
    "backward",
    "loss_and_grads",
    "predict",
    "adamw_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "fingerprint",
]


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


# --------------------------------------------------------------------------
# backbones
# --------------------------------------------------------------------------


@dataclass
class LinearBackbone:
    """``out[i, :, c] = W @ z[i, :, c] + b``, one weight shared by all channels."""

    W: np.ndarray  # (H, T)
    b: np.ndarray  # (H,)

    def params(self) -> dict:
        return {"W": self.W, "b": self.b}

    def with_params(self, params: dict) -> "LinearBackbone":
        return LinearBackbone(params["W"], params["b"])


@dataclass
class MLPBackbone:
    """One tanh hidden layer applied per channel: ``W2 @ tanh(W1 @ z + b1) + b2``."""

    W1: np.ndarray  # (K, T)
    b1: np.ndarray  # (K,)
    W2: np.ndarray  # (H, K)
    b2: np.ndarray  # (H,)

    def params(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def with_params(self, params: dict) -> "MLPBackbone":
        return MLPBackbone(params["W1"], params["b1"], params["W2"], params["b2"])


def init_backbone(T: int, H: int, C: int, seed: int, hidden: int = 0):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` weights, zero biases.

    ``C`` is accepted for interface symmetry; weights are shared across channels.
    """
    if min(T, H, C) < 1 or hidden < 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    if hidden == 0:
        bound = 1.0 / np.sqrt(T)
        return LinearBackbone(rng.uniform(-bound, bound, (H, T)), np.zeros(H))
    b1 = 1.0 / np.sqrt(T)
    b2 = 1.0 / np.sqrt(hidden)
    return MLPBackbone(
        rng.uniform(-b1, b1, (hidden, T)),
        np.zeros(hidden),
        rng.uniform(-b2, b2, (H, hidden)),
        np.zeros(H),
    )


def _hidden(model: MLPBackbone, z):
    return np.tanh(np.matmul(model.W1, z) + model.b1[None, :, None])


def forward(model, z_in) -> np.ndarray:
    z_in = np.asarray(z_in, dtype=np.float64)
    if isinstance(model, LinearBackbone):
        if z_in.ndim != 3 or z_in.shape[1] != model.W.shape[1]:
            raise ValueError(f"expected (N, {model.W.shape[1]}, C) input, got {z_in.shape}")
        return np.matmul(model.W, z_in) + model.b[None, :, None]
    if z_in.ndim != 3 or z_in.shape[1] != model.W1.shape[1]:
        raise ValueError(f"expected (N, {model.W1.shape[1]}, C) input, got {z_in.shape}")
    a = _hidden(model, z_in)
    return np.matmul(model.W2, a) + model.b2[None, :, None]


def backward(model, z_in, grad_out):
    """Gradients of a scalar loss w.r.t. the parameters and the input, given dL/d(out)."""
    if isinstance(model, LinearBackbone):
        grads = {
            "W": np.tensordot(grad_out, z_in, axes=([0, 2], [0, 2])),
            "b": grad_out.sum(axis=(0, 2)),
        }
        return grads, np.matmul(model.W.T, grad_out)
    a = _hidden(model, z_in)
    ga = np.matmul(model.W2.T, grad_out)
    gpre = ga * (1.0 - a * a)
    grads = {
        "W1": np.tensordot(gpre, z_in, axes=([0, 2], [0, 2])),
        "b1": gpre.sum(axis=(0, 2)),
        "W2": np.tensordot(grad_out, a, axes=([0, 2], [0, 2])),
        "b2": grad_out.sum(axis=(0, 2)),
    }
    return grads, np.matmul(model.W1.T, gpre)


# --------------------------------------------------------------------------
# normalizer wrapper
# --------------------------------------------------------------------------


@dataclass
class Normalizer:
    """A normalizer kind plus its (possibly trainable) parameters."""

    kind: str = "none"
    shape: Optional[ShapeParams] = None
    post: Optional[AffinePost] = None

    def __post_init__(self):
        if self.kind not in NORMALIZER_KINDS:
            raise ValueError(f"unknown normalizer {self.kind!r}; choose from {NORMALIZER_KINDS}")
        if self.kind == "norin" and self.shape is None:
            raise ValueError("the norin normalizer needs shape parameters")

    def stats(self, lookbacks) -> Optional[InstanceStats]:
        if self.kind == "norin":
            return robust_loc_scale(lookbacks)
        if self.kind == "revin":
            return mean_std_stats(lookbacks)
        return None

    def forward(self, x, stats):
        if self.kind == "norin":
            return jsu_forward(x, stats, self.shape)
        if self.kind == "revin":
            return revin_forward(x, stats, self.post)
        return np.asarray(x, dtype=np.float64)

    def inverse(self, z, stats):
        if self.kind == "norin":
            return jsu_inverse(z, stats, self.shape)
        if self.kind == "revin":
            return revin_inverse(z, stats, self.post)
        return np.asarray(z, dtype=np.float64)

    @property
    def affine_trainable(self) -> bool:
        return self.kind == "revin" and self.post is not None and self.post.enabled


def predict(model, norm: Normalizer, lookbacks, stats=None) -> np.ndarray:
    if stats is None:
        stats = norm.stats(lookbacks)
    return norm.inverse(forward(model, norm.forward(lookbacks, stats)), stats)


def loss_and_grads(model, batch: WindowBatch, norm: Normalizer, joint: bool = False, stats=None):
    """Original-space MSE and its gradients.

    Returns ``(loss, grads)`` where ``grads`` holds one entry per backbone
    parameter, ``"gamma"``/``"beta"`` when RevIN's affine layer is enabled, and
    per-channel ``"delta"``/``"epsilon"`` partials when ``joint`` is set (for a
    shared shape, the scalar gradient is their sum).
    """
    x, y = batch.lookbacks, batch.horizons
    if stats is None:
        stats = norm.stats(x)
    z_in = norm.forward(x, stats)
    out = forward(model, z_in)
    y_hat = norm.inverse(out, stats)
    resid = y_hat - y
    loss = float(np.mean(resid**2))
    g_yhat = 2.0 * resid / resid.size

    extra = {}
    if norm.kind == "norin":
        scale = stats.scale[:, None, :]
        delta, eps = norm.shape.delta, norm.shape.epsilon
        w = (out - eps) / delta
        dx_dz = scale * np.cosh(w) / delta
        g_out = g_yhat * dx_dz
        if joint:
            extra["delta"] = -np.sum(g_yhat * dx_dz * w, axis=(0, 1))
            extra["epsilon"] = -np.sum(g_out, axis=(0, 1))
    elif norm.kind == "revin" and norm.affine_trainable:
        gamma, beta = norm.post.gamma, norm.post.beta
        sigma = stats.scale[:, None, :]
        g_out = g_yhat * sigma / gamma
        extra["gamma"] = -np.sum(g_out * (out - beta) / gamma, axis=(0, 1))
        extra["beta"] = -np.sum(g_out, axis=(0, 1))
    elif norm.kind == "revin":
        g_out = g_yhat * stats.scale[:, None, :]
    else:
        g_out = g_yhat

    grads, g_z = backward(model, z_in, g_out)

    if norm.kind == "norin" and joint:
        u = (x - stats.loc[:, None, :]) / stats.scale[:, None, :]
        extra["delta"] = extra["delta"] + np.sum(g_z * np.arcsinh(u), axis=(0, 1))
        extra["epsilon"] = extra["epsilon"] + np.sum(g_z, axis=(0, 1))
    elif norm.affine_trainable:
        u = (x - stats.loc[:, None, :]) / stats.scale[:, None, :]
        extra["gamma"] = extra["gamma"] + np.sum(g_z * u, axis=(0, 1))
        extra["beta"] = extra["beta"] + np.sum(g_z, axis=(0, 1))
    grads.update(extra)
    return loss, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def adamw_step(params: dict, grads: dict, state: dict, config, step: int, lr=None, weight_decay=None) -> dict:
    """One decoupled-weight-decay Adam update.

    ``state`` maps each parameter name to its ``(m, v)`` pair and is updated
    in place; the updated parameters are returned as a new dict.
    """
    if step < 1:
        raise ValueError("step index starts at 1")
    lr = config.lr if lr is None else lr
    wd = config.weight_decay if weight_decay is None else weight_decay
    b1, b2 = config.beta1, config.beta2
    new = {}
    for name, p in params.items():
        g = grads[name]
        m, v = state.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state[name] = (m, v)
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        denom = np.sqrt(v_hat) + config.adam_eps
        # v_hat == 0 forces m_hat == 0; take the ratio as 0 so adam_eps = 0 stays usable
        ratio = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        new[name] = p - lr * (ratio + wd * p)
    return new


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int = 3
    joint_shape_training: bool = False
    shape_lr: float = 1e-2
    lookback: int = 96
    horizon: int = 24
    hidden: int = 0
    revin_affine: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lookback < 1 or self.horizon < 1:
            raise ValueError("lookback and horizon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    fingerprint: str
    seed: int
    metrics: dict  # {"train": {"mse", "mae"}, "val": ..., "test": ...}
    val_trace: list
    shape_trajectory: list  # per-epoch {"delta": [...], "epsilon": [...]} in joint mode
    epochs_run: int
    best_epoch: int
    best_val_mse: float
    initial_shape: Optional[dict] = None
    final_shape: Optional[dict] = None
    clamp_events: list = field(default_factory=list)
    model: object = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(replace(self, model=None))
        d.pop("model")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(series: MultiSeries, split: SplitSpec, norm: Normalizer, config: TrainConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(series.values).tobytes())
    h.update(_canonical(asdict(split)).encode())
    h.update(_canonical(config.to_dict()).encode())
    h.update(norm.kind.encode())
    if norm.kind == "norin":
        h.update(norm.shape.to_vector().tobytes())
    if norm.post is not None:
        h.update(_canonical({"enabled": norm.post.enabled}).encode())
    return h.hexdigest()[:16]


def _metrics(model, norm, batch, stats):
    pred = predict(model, norm, batch.lookbacks, stats)
    err = pred - batch.horizons
    return {"mse": float(np.mean(err**2)), "mae": float(np.mean(np.abs(err)))}


def _shape_snapshot(shape: ShapeParams) -> dict:
    return {"delta": [float(v) for v in shape.delta], "epsilon": [float(v) for v in shape.epsilon]}


def train(
    series: MultiSeries,
    split: SplitSpec,
    normalizer: str = "none",
    shape: Optional[ShapeParams] = None,
    config: TrainConfig = TrainConfig(),
) -> RunResult:
    """Mini-batch AdamW training with early stopping on validation MSE.

    Shape parameters stay frozen unless ``config.joint_shape_training`` is set,
    in which case they get their own Adam state at ``config.shape_lr`` with no
    weight decay and ``delta`` is clamped to stay above ``DELTA_MIN``.
    With ``early_stop_patience <= 0`` all epochs run and the last parameters
    are kept; otherwise the best-validation parameters are restored.
    """
    T, H, C = config.lookback, config.horizon, series.n_channels
    post = AffinePost.identity(C, enabled=config.revin_affine) if normalizer == "revin" else None
    norm = Normalizer(normalizer, shape if normalizer == "norin" else None, post)
    joint = bool(config.joint_shape_training) and normalizer == "norin"
    fp = fingerprint(series, split, norm, config)

    parts = {p: make_windows(series, split, p, T, H) for p in ("train", "val", "test")}
    stats = {p: norm.stats(b.lookbacks) for p, b in parts.items()}

    model = init_backbone(T, H, C, config.seed, hidden=config.hidden)
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng = np.random.default_rng(ss.spawn(2)[1])

    params = dict(model.params())
    if norm.affine_trainable:
        params["gamma"] = norm.post.gamma.copy()
        params["beta"] = norm.post.beta.copy()
    shape_vec = norm.shape.to_vector() if joint else None
    initial_shape = _shape_snapshot(norm.shape) if norm.kind == "norin" else None

    def unpack(p, vec):
        m = model.with_params(p)
        if norm.affine_trainable:
            norm.post.gamma, norm.post.beta = p["gamma"], p["beta"]
        if joint:
            norm.shape = ShapeParams.from_vector(vec, C, norm.shape.shared)
        return m

    state, shape_state = {}, {}
    step = 0
    val_trace, trajectory, clamp_events = [], [], []
    best = (np.inf, -1, params, shape_vec)
    patience = config.early_stop_patience
    stale = 0
    train_batch = parts["train"]
    train_stats = stats["train"]
    # frozen normalizers let the forward map be computed once
    z_cache = None if joint else norm.forward(train_batch.lookbacks, train_stats)

    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(train_batch.n)
        for start in range(0, train_batch.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model = unpack(params, shape_vec)
            sub = InstanceStats(train_stats.loc[idx], train_stats.scale[idx], train_stats.kind) if train_stats else None
            batch = train_batch.take(idx)
            if z_cache is not None and not norm.affine_trainable:
                loss, grads = _frozen_loss_and_grads(model, batch, norm, sub, z_cache[idx])
            else:
                loss, grads = loss_and_grads(model, batch, norm, joint=joint, stats=sub)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss in epoch {epoch}", epoch)
            step += 1
            params = adamw_step(params, grads, state, config, step)
            if joint:
                gvec = _shape_grad_vector(grads, norm.shape.shared)
                shape_vec = adamw_step(
                    {"s": shape_vec}, {"s": gvec}, shape_state, config, step, lr=config.shape_lr, weight_decay=0.0
                )["s"]
                n_d = 1 if norm.shape.shared else C
                low = shape_vec[:n_d] < DELTA_MIN
                if np.any(low):
                    shape_vec = shape_vec.copy()
                    shape_vec[:n_d][low] = DELTA_MIN
                    clamp_events.append({"epoch": epoch, "step": step})
        epochs_run = epoch
        model = unpack(params, shape_vec)
        val = _metrics(model, norm, parts["val"], stats["val"])["mse"]
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss in epoch {epoch}", epoch)
        val_trace.append(val)
        if joint:
            trajectory.append(dict(_shape_snapshot(norm.shape), epoch=epoch))
        if val < best[0]:
            best = (val, epoch, params, shape_vec)
            stale = 0
        else:
            stale += 1
        if patience > 0 and stale >= patience:
            break

    if patience > 0 and best[1] > 0:
        params, shape_vec = best[2], best[3]
    model = unpack(params, shape_vec)
    metrics = {p: _metrics(model, norm, parts[p], stats[p]) for p in ("train", "val", "test")}
    if config.epochs == 0 or epochs_run == 0:
        best_val, best_epoch = metrics["val"]["mse"], 0
    else:
        best_val, best_epoch = best[0], best[1]
    return RunResult(
        fingerprint=fp,
        seed=config.seed,
        metrics=metrics,
        val_trace=val_trace,
        shape_trajectory=trajectory,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        best_val_mse=float(best_val),
        initial_shape=initial_shape,
        final_shape=_shape_snapshot(norm.shape) if norm.kind == "norin" else None,
        clamp_events=clamp_events,
        model=model,
    )


def _shape_grad_vector(grads, shared):
    if shared:
        return np.array([grads["delta"].sum(), grads["epsilon"].sum()])
    return np.concatenate([grads["delta"], grads["epsilon"]])


def _frozen_loss_and_grads(model, batch, norm, stats, z_in):
    """Same as :func:`loss_and_grads` with a precomputed forward map and no shape gradients."""
    out = forward(model, z_in)
    y_hat = norm.inverse(out, stats)
    resid = y_hat - batch.horizons
    g = 2.0 * resid / resid.size
    if norm.kind == "norin":
        w = (out - norm.shape.epsilon) / norm.shape.delta
        g = g * stats.scale[:, None, :] * np.cosh(w) / norm.shape.delta
    elif norm.kind == "revin":
        g = g * stats.scale[:, None, :]
    grads, _ = backward(model, z_in, g)
    return float(np.mean(resid**2)), grads


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, model, seed: int, config_hash: str) -> None:
    """One JSON header line followed by the parameters as raw little-endian float64."""
    params = model.params()
    header = {
        "kind": "linear" if isinstance(model, LinearBackbone) else "mlp",
        "seed": seed,
        "config_hash": config_hash,
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode())
        flat = np.frombuffer(fh.read(), dtype="<f8")
    params, pos = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        params[name] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise ValueError("checkpoint payload size does not match its header")
    model = LinearBackbone(params["W"], params["b"]) if header["kind"] == "linear" else MLPBackbone(**params)
    return model, header
