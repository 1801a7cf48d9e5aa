"""Displacement errors and per-scene aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import TrajectoryWindow


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in length")
    return p, g


def ade(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def fde(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p[-1] - g[-1]))


@dataclass
class Report:
    ade_mean: float
    fde_mean: float
    n_windows: int


def evaluate(predict: Callable[[Sequence[TrajectoryWindow]], np.ndarray], windows: Sequence[TrajectoryWindow]) -> Report:
    """``predict`` maps a list of windows to an (N, T, 2) array of points."""
    if not windows:
        raise ValueError("evaluate needs at least one test window")
    preds = np.asarray(predict(list(windows)), dtype=np.float64)
    ades = [ade(p, w.future) for p, w in zip(preds, windows)]
    fdes = [fde(p, w.future) for p, w in zip(preds, windows)]
    # sorted so the means are bitwise independent of window order
    return Report(float(np.mean(np.sort(ades))), float(np.mean(np.sort(fdes))), len(windows))


def normalize_curves(curves: Mapping[str, Mapping[float, float]], baseline: Mapping[str, float],
                     ) -> tuple[list[float], np.ndarray, np.ndarray]:
    """Divide each scene's curve by its baseline, then average across scenes.

    ``curves`` maps scene -> {fraction: value}. Returns (fractions, mean, std)
    with the population standard deviation across scenes.
    """
    if not curves:
        raise ValueError("no curves to normalise")
    fractions = sorted({f for c in curves.values() for f in c})
    rows = []
    for scene, curve in sorted(curves.items()):
        missing = [f for f in fractions if f not in curve]
        if missing:
            raise ValueError(f"scene {scene!r} has no value for fractions {missing}")
        rows.append([curve[f] / baseline[scene] for f in fractions])
    arr = np.array(rows)
    return fractions, arr.mean(axis=0), arr.std(axis=0)
