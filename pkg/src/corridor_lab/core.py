"""Domain types, windowing and the chronological identity split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Fraction of identities (by first appearance) always held out for testing.
TEST_FRACTION = 0.2
MAX_TRAIN_FRACTION = 0.8
MIN_IDENTITIES = 5


@dataclass(frozen=True)
class GridShape:
    h: int
    w: int

    def __post_init__(self):
        if self.h < 8 or self.w < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.h}x{self.w}")


@dataclass(frozen=True)
class Tracklet:
    """One identity's path. ``samples`` is an (n, 3) array of (frame, x, y)."""

    identity: int
    scene: str
    samples: np.ndarray
    rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
            raise ValueError(f"tracklet {self.identity}: samples must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(s[:, 1:])):
            raise ValueError(f"tracklet {self.identity}: non-finite coordinates")
        if np.any(np.diff(s[:, 0]) <= 0):
            raise ValueError(f"tracklet {self.identity}: frame indices must strictly increase")
        if self.rate <= 0:
            raise ValueError(f"tracklet {self.identity}: rate must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def frames(self) -> np.ndarray:
        return self.samples[:, 0].astype(np.int64)

    @property
    def points(self) -> np.ndarray:
        return self.samples[:, 1:]

    @property
    def first_frame(self) -> int:
        return int(self.samples[0, 0])

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Tracklet):
            return NotImplemented
        return (
            self.identity == other.identity
            and self.scene == other.scene
            and self.rate == other.rate
            and np.array_equal(self.samples, other.samples)
        )

    def __hash__(self):
        return hash((self.identity, self.scene, self.rate, self.samples.tobytes()))


@dataclass(frozen=True)
class WindowSpec:
    hist_len: int = 8
    pred_len: int = 12
    stride: int = 1
    rate: float = 2.0

    def __post_init__(self):
        if self.hist_len < 2:
            raise ValueError("hist_len must be >= 2")
        if self.pred_len < 1:
            raise ValueError("pred_len must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def length(self) -> int:
        return self.hist_len + self.pred_len


@dataclass(frozen=True)
class TrajectoryWindow:
    identity: int
    scene: str
    past: np.ndarray  # (H, 2)
    future: np.ndarray  # (T, 2)
    start_frame: int


@dataclass
class SplitDataset:
    train_windows: list[TrajectoryWindow]
    test_windows: list[TrajectoryWindow]
    train_fraction: float
    person_seconds_train: float
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)


def downsample_tracklet(t: Tracklet, target_rate: float) -> Tracklet:
    """Keep every (rate / target_rate)-th sample, starting with the first.

    Frame indices are re-expressed in the downsampled clock, so a sample kept
    from native frame f gets index f // step.
    """
    ratio = t.rate / target_rate
    step = int(round(ratio))
    if t.rate < target_rate or abs(ratio - step) > 1e-9:
        raise ValueError(f"cannot downsample from {t.rate} to {target_rate}: rates not divisible")
    if step == 1:
        return t
    frames = t.frames
    # "every step-th sample" is taken on the native clock so gaps stay gaps
    keep = (frames - frames[0]) % step == 0
    kept = t.samples[keep].copy()
    kept[:, 0] = (kept[:, 0] - frames[0]) // step + frames[0] // step
    return Tracklet(t.identity, t.scene, kept, float(target_rate))


def contiguous_runs(t: Tracklet) -> list[np.ndarray]:
    """Split a tracklet's samples wherever the frame index jumps by more than one."""
    breaks = np.nonzero(np.diff(t.frames) != 1)[0] + 1
    return np.split(t.samples, breaks)


def build_windows(t: Tracklet, spec: WindowSpec) -> list[TrajectoryWindow]:
    out = []
    n = spec.length
    for run in contiguous_runs(t):
        for s in range(0, len(run) - n + 1, spec.stride):
            chunk = run[s:s + n]
            out.append(TrajectoryWindow(
                identity=t.identity,
                scene=t.scene,
                past=chunk[:spec.hist_len, 1:].copy(),
                future=chunk[spec.hist_len:, 1:].copy(),
                start_frame=int(chunk[0, 0]),
            ))
    return out


def appearance_order(tracklets: Iterable[Tracklet]) -> list[int]:
    """Identities sorted by first appearance, ties broken by ascending id."""
    first: dict[int, int] = {}
    for t in tracklets:
        f = t.first_frame
        if t.identity not in first or f < first[t.identity]:
            first[t.identity] = f
    return sorted(first, key=lambda i: (first[i], i))


def split_identities(order: Sequence[int], m: float) -> tuple[list[int], list[int]]:
    if not 0 < m <= MAX_TRAIN_FRACTION:
        raise ValueError(f"train fraction must lie in (0, 0.8], got {m}")
    n = len(order)
    if n < MIN_IDENTITIES:
        raise ValueError(f"need at least {MIN_IDENTITIES} identities for a split, got {n}")
    # 1e-9 guards against 0.8 * 10 = 8.000000000000002 style ceil overshoot
    n_train = math.ceil(m * n - 1e-9)
    n_test = math.floor(TEST_FRACTION * n + 1e-9)
    return list(order[:n_train]), list(order[n - n_test:])


def chronological_split(tracklets: Sequence[Tracklet], m: float,
                        spec: WindowSpec | None = None) -> SplitDataset:
    spec = spec or WindowSpec()
    train_ids, test_ids = split_identities(appearance_order(tracklets), m)
    train_set, test_set = set(train_ids), set(test_ids)
    train_t = [t for t in tracklets if t.identity in train_set]
    test_t = [t for t in tracklets if t.identity in test_set]
    return SplitDataset(
        train_windows=[w for t in train_t for w in build_windows(t, spec)],
        test_windows=[w for t in test_t for w in build_windows(t, spec)],
        train_fraction=m,
        person_seconds_train=person_seconds(train_t),
        train_ids=train_ids,
        test_ids=test_ids,
    )


def person_seconds(tracklets: Iterable[Tracklet]) -> float:
    return float(sum((len(t) - 1) / t.rate for t in tracklets))
