"""Fit a warm-start shape, then compare identity, RevIN and NoRIN on a small synthetic series.

Run with ``python demos/quickstart.py``; it finishes in a few seconds.
"""

import numpy as np

from norin.backbone import TrainConfig, train
from norin.series import GeneratorParams, SplitSpec, moments, split_values, synth_heavy_tailed
from norin.shape_fit import warm_start


def main():
    params = GeneratorParams(delta=1.0, epsilon=(0.0, 0.5), trend=1.0, season_amplitude=1.0, season_period=24)
    series = synth_heavy_tailed(seed=0, L=3000, C=2, params=params)
    split = SplitSpec()

    train_values = split_values(series, split, "train")
    for c, name in enumerate(series.channel_names):
        m = moments(train_values[:, c])
        print(f"{name}: skewness {m.skewness:+.3f}, kurtosis {m.kurtosis:.3f}")

    ws = warm_start(series, split, mode="per-channel")
    print("warm-start delta", np.round(ws.shape.delta, 3), "epsilon", np.round(ws.shape.epsilon, 3))

    cfg = TrainConfig(lookback=48, horizon=12, epochs=10, seed=1)
    for kind, shape in (("none", None), ("revin", None), ("norin", ws.shape)):
        run = train(series, split, kind, shape, cfg)
        print(f"{kind:>6}: test MSE {run.metrics['test']['mse']:.4f} after {run.epochs_run} epochs")


if __name__ == "__main__":
    main()
