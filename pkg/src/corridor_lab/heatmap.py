"""Point <-> heatmap conversion and softargmax decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridShape, TrajectoryWindow

DEFAULT_SIGMA = 1.5
DEFAULT_BETA = 30.0


def _coords(shape: GridShape):
    return np.arange(shape.h, dtype=np.float64), np.arange(shape.w, dtype=np.float64)


def rasterize_gaussian(point, shape: GridShape, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Peak-normalised Gaussian (max 1 at the mean) on an h x w grid.

    Points outside the grid keep their true position; the grid then holds
    only the kernel's tail.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x, y = float(point[0]), float(point[1])
    rows, cols = _coords(shape)
    gy = np.exp(-((rows - y) ** 2) / (2 * sigma ** 2))
    gx = np.exp(-((cols - x) ** 2) / (2 * sigma ** 2))
    # separable: exp(-(dx^2 + dy^2)/2s^2) = exp(-dy^2/2s^2) * exp(-dx^2/2s^2)
    return np.outer(gy, gx)


def trajectory_to_heatmaps(points, shape: GridShape, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """(K, 2) points -> (K, h, w) stack."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rows, cols = _coords(shape)
    gy = np.exp(-((rows[None, :] - pts[:, 1:2]) ** 2) / (2 * sigma ** 2))
    gx = np.exp(-((cols[None, :] - pts[:, 0:1]) ** 2) / (2 * sigma ** 2))
    return gy[:, :, None] * gx[:, None, :]


def _softmax_weights(grid: np.ndarray, beta: float) -> np.ndarray:
    z = beta * grid.reshape(grid.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    q = np.exp(z)
    return q / q.sum(axis=1, keepdims=True)


def soft_argmax_batch(grids: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """(K, h, w) grids -> (K, 2) expected (x, y) under softmax(beta * grid)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    k, h, w = grids.shape
    q = _softmax_weights(grids, beta).reshape(k, h, w)
    x = (q.sum(axis=1) * np.arange(w)).sum(axis=1)
    y = (q.sum(axis=2) * np.arange(h)).sum(axis=1)
    return np.stack([x, y], axis=1)


def soft_argmax(grid: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    return soft_argmax_batch(np.asarray(grid, dtype=np.float64)[None], beta)[0]


def decode_prediction(pred: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Decode a (T, h, w) stack of logits into T points."""
    return soft_argmax_batch(np.asarray(pred, dtype=np.float64), beta)


@dataclass
class ObservationStack:
    heatmaps: np.ndarray  # (H, h, w)
    seg: np.ndarray  # (C, h, w)

    def __post_init__(self):
        if self.heatmaps.shape[1:] != self.seg.shape[1:]:
            raise ValueError(f"heatmaps {self.heatmaps.shape} and seg {self.seg.shape} disagree spatially")

    @property
    def channels(self) -> int:
        return self.heatmaps.shape[0] + self.seg.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.heatmaps, self.seg], axis=0)


def observation(window: TrajectoryWindow, seg: np.ndarray, sigma: float = DEFAULT_SIGMA) -> ObservationStack:
    shape = GridShape(seg.shape[1], seg.shape[2])
    return ObservationStack(trajectory_to_heatmaps(window.past, shape, sigma), seg)


def target(window: TrajectoryWindow, shape: GridShape, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    return trajectory_to_heatmaps(window.future, shape, sigma)
