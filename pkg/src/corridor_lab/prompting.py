"""Where and how a spatial prompt is combined with the predictor input."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autograd as ag
from .heatmap import ObservationStack


class ApplyMode(str, Enum):
    SUM_ALL_HEATMAPS = "SumAllHeatmaps"
    SUM_FIRST_HEATMAP = "SumFirstHeatmap"
    SUM_SEG = "SumSeg"
    SUM_BOTH = "SumBoth"
    MUL_ALL_HEATMAPS = "MulAllHeatmaps"
    MUL_FIRST_HEATMAP = "MulFirstHeatmap"
    MUL_SEG = "MulSeg"
    MUL_BOTH = "MulBoth"

    @property
    def how(self) -> str:
        return "sum" if self.value.startswith("Sum") else "mul"

    def channels(self, hist_len: int, classes: int) -> list[int]:
        target = self.value[3:]
        heat = list(range(hist_len))
        seg = list(range(hist_len, hist_len + classes))
        return {"AllHeatmaps": heat, "FirstHeatmap": [0], "Seg": seg, "Both": heat + seg}[target]


def apply_prompt(obs: ObservationStack, grid: np.ndarray, mode: ApplyMode | str) -> ObservationStack:
    mode = ApplyMode(mode)
    if grid.shape != obs.heatmaps.shape[1:]:
        raise ValueError(f"prompt {grid.shape} does not match observation grid {obs.heatmaps.shape[1:]}")
    hist_len = obs.heatmaps.shape[0]
    x = ag.combine_channels(obs.stacked()[:, None], grid, mode.channels(hist_len, obs.seg.shape[0]), mode.how)
    data = x.data[:, 0]
    return ObservationStack(data[:hist_len], data[hist_len:])


def apply_prompt_batch(x: ag.Tensor, prompt: ag.Tensor, mode: ApplyMode | str, hist_len: int) -> ag.Tensor:
    """Tensor version on a (H + C, N, h, w) batch; ``prompt`` is (h, w) or (N, h, w)."""
    mode = ApplyMode(mode)
    classes = x.shape[0] - hist_len
    return ag.combine_channels(x, prompt, mode.channels(hist_len, classes), mode.how)
