"""Non-adaptive reference predictors: constant velocity and a history-only MLP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .core import TrajectoryWindow
from .predictor import iterate_batches


def constant_velocity(window: TrajectoryWindow, pred_len: int | None = None, mean_velocity: bool = False) -> np.ndarray:
    past = np.asarray(window.past, dtype=np.float64)
    if len(past) < 2:
        raise ValueError("constant velocity needs at least two past points")
    t = pred_len if pred_len is not None else len(window.future)
    if mean_velocity:
        v = (past[-1] - past[0]) / (len(past) - 1)
    else:
        v = past[-1] - past[-2]
    k = np.arange(1, t + 1, dtype=np.float64)[:, None]
    return past[-1] + k * v


@dataclass
class MLPConfig:
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


class TrajectoryMLP:
    """Two hidden layers from past step offsets to future step offsets.

    Working in offsets (differences between consecutive points) makes the
    predictor translation-equivariant by construction.
    """

    def __init__(self, hist_len: int, pred_len: int, hidden: int = 64, seed: int = 0, zero_output: bool = False):
        rng = np.random.default_rng(seed)
        d_in, d_out = 2 * (hist_len - 1), 2 * pred_len
        gain = np.sqrt(2.0 / (1.0 + 0.1 ** 2))

        def dense(fan_in, fan_out, name):
            w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))
            return ag.Tensor(w, True, f"{name}.weight"), ag.Tensor(np.zeros(fan_out), True, f"{name}.bias")

        self.hist_len, self.pred_len = hist_len, pred_len
        self.layers = [dense(d_in, hidden, "l0"), dense(hidden, hidden, "l1"), dense(hidden, d_out, "l2")]
        if zero_output:
            self.layers[2][0].data[:] = 0.0

    def parameters(self) -> list[ag.Tensor]:
        return [t for layer in self.layers for t in layer]

    def forward(self, offsets) -> ag.Tensor:
        h = ag.as_tensor(offsets)
        for i, (w, b) in enumerate(self.layers):
            h = ag.linear(h, w, b)
            if i < len(self.layers) - 1:
                h = ag.leaky_relu(h, 0.1)
        return h

    def predict_many(self, windows: Sequence[TrajectoryWindow]) -> np.ndarray:
        x = np.stack([history_offsets(w) for w in windows])
        steps = self.forward(x).data.reshape(len(windows), self.pred_len, 2)
        last = np.stack([w.past[-1] for w in windows])[:, None, :]
        return last + np.cumsum(steps, axis=1)

    def predict(self, window: TrajectoryWindow) -> np.ndarray:
        return self.predict_many([window])[0]


def history_offsets(w: TrajectoryWindow) -> np.ndarray:
    return np.diff(np.asarray(w.past, dtype=np.float64), axis=0).reshape(-1)


def future_offsets(w: TrajectoryWindow) -> np.ndarray:
    pts = np.vstack([w.past[-1:], w.future])
    return np.diff(pts, axis=0).reshape(-1)


def train_mlp(windows: Sequence[TrajectoryWindow], config: MLPConfig | None = None) -> tuple[TrajectoryMLP, list[float]]:
    """Fit on squared error of future offsets; returns the model and its per-epoch mean loss."""
    config = config or MLPConfig()
    if not windows:
        raise ValueError("train_mlp needs at least one window")
    hist_len, pred_len = len(windows[0].past), len(windows[0].future)
    model = TrajectoryMLP(hist_len, pred_len, config.hidden, config.seed)
    x = np.stack([history_offsets(w) for w in windows])
    y = np.stack([future_offsets(w) for w in windows])
    opt = ag.Adam(model.parameters(), config.lr)
    rng = np.random.default_rng(config.seed)
    curve = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in iterate_batches(len(windows), config.batch_size, rng):
            opt.zero_grad()
            with ag.Tape() as tape:
                value = ag.squared_error_sum(model.forward(x[idx]), y[idx])
                tape.backward(value)
            opt.step()
            total += value.item()
        curve.append(total / len(windows))
    return model, curve
