"""Latent corridors: rank-1 per-scene input prompts, and the adaptation configurations.

A corridor for an h x w scene is a pair of vectors (u, v); the prompt is
their outer product, added to (or multiplied into) the predictor input.
Adaptation never copies the frozen encoder/decoder: an
:class:`AdaptedPredictor` is a view of the shared base plus the per-scene
corridor and, depending on the mode, its own or a shared head.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .core import GridShape, SplitDataset, TrajectoryWindow
from .heatmap import DEFAULT_BETA, DEFAULT_SIGMA, decode_prediction
from .predictor import PARTS, Predictor, encode_batch, features, forward_batch, head_logits, iterate_batches
from .prompting import ApplyMode, apply_prompt  # noqa: F401 - re-exported


class Mode(str, Enum):
    LC = "LC"
    LC_JOINT_FT = "LCJointFT"
    LC_PER_SCENE_FT = "LCPerSceneFT"
    FINETUNE_ONLY = "FinetuneOnly"

    @property
    def uses_corridor(self) -> bool:
        return self is not Mode.FINETUNE_ONLY

    @property
    def tunes_head(self) -> bool:
        return self is not Mode.LC


@dataclass
class LatentCorridor:
    scene: str
    u: ag.Tensor  # (h,)
    v: ag.Tensor  # (w,)

    @property
    def shape(self) -> GridShape:
        return GridShape(self.u.size, self.v.size)

    @property
    def param_count(self) -> int:
        return self.u.size + self.v.size

    def parameters(self) -> list[ag.Tensor]:
        return [self.u, self.v]


@dataclass
class AdaptationConfig:
    mode: Mode = Mode.LC
    apply_mode: ApplyMode = ApplyMode.SUM_ALL_HEATMAPS
    prompt_lr: float = 1e-2
    head_lr: float = 1e-3
    epochs: int = 10
    fraction: float = 0.8
    seed: int = 0
    batch_size: int = 16
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.apply_mode = ApplyMode(self.apply_mode)
        if self.prompt_lr <= 0 or self.head_lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid adaptation config: {self}")


def _kaiming_uniform(rng: np.random.Generator, fan: int) -> np.ndarray:
    bound = np.sqrt(2.0) * np.sqrt(3.0 / fan)
    return rng.uniform(-bound, bound, size=fan)


def init_corridor(shape: GridShape, seed: int, scene: str = "") -> LatentCorridor:
    rng = np.random.default_rng(seed)
    u = ag.Tensor(_kaiming_uniform(rng, shape.h), requires_grad=True, name=f"{scene}:u")
    v = ag.Tensor(_kaiming_uniform(rng, shape.w), requires_grad=True, name=f"{scene}:v")
    return LatentCorridor(scene, u, v)


def materialize(c: LatentCorridor) -> np.ndarray:
    return np.outer(c.u.data, c.v.data)


def materialize_tensor(c: LatentCorridor) -> ag.Tensor:
    return ag.outer(c.u, c.v)


def parameter_overhead(base_count: int, shape: GridShape | tuple[int, int], scenes: int = 1) -> float:
    h, w = (shape.h, shape.w) if isinstance(shape, GridShape) else shape
    if base_count <= 0 or scenes <= 0:
        raise ValueError("counts must be positive")
    return scenes * (h + w) / base_count


@dataclass
class AdaptedPredictor:
    """Shared base parts plus this scene's corridor and head (either may be the base's)."""

    base: Predictor
    scene: str
    corridor: LatentCorridor | None = None
    head: dict[str, ag.Tensor] | None = None
    apply_mode: ApplyMode = ApplyMode.SUM_ALL_HEATMAPS
    loss_curve: list[float] = field(default_factory=list)

    @property
    def head_params(self) -> dict[str, ag.Tensor]:
        return self.head if self.head is not None else self.base.params["head"]

    def prompt(self) -> np.ndarray | None:
        return None if self.corridor is None else materialize(self.corridor)

    def logits(self, windows: Sequence[TrajectoryWindow], seg: np.ndarray, sigma: float = DEFAULT_SIGMA,
               batch_size: int = 64) -> np.ndarray:
        segs = {w.scene: seg for w in windows}
        prompt = self.prompt()
        out = []
        for lo in range(0, len(windows), batch_size):
            x, _ = encode_batch(windows[lo:lo + batch_size], segs, self.base.shape, sigma)
            out.append(forward_batch(self.base, x, prompt, self.apply_mode, self.head).data)
        return np.concatenate(out, axis=1)

    def predict(self, windows: Sequence[TrajectoryWindow], seg: np.ndarray, sigma: float = DEFAULT_SIGMA,
                beta: float = DEFAULT_BETA) -> np.ndarray:
        """(N, T, 2) decoded points."""
        if not windows:
            return np.zeros((0, self.base.arch.pred_len, 2))
        logits = self.logits(windows, seg, sigma)
        return np.stack([decode_prediction(logits[:, i], beta) for i in range(logits.shape[1])])

    def predict_points(self, window: TrajectoryWindow, seg: np.ndarray, sigma: float = DEFAULT_SIGMA,
                       beta: float = DEFAULT_BETA) -> np.ndarray:
        return self.predict([window], seg, sigma, beta)[0]


def base_view(base: Predictor, scene: str) -> AdaptedPredictor:
    return AdaptedPredictor(base, scene)


def trainable_parameters(views: Mapping[str, AdaptedPredictor], mode: Mode | str) -> list[ag.Tensor]:
    """Unique tensors trained by ``adapt`` in ``mode`` (a shared head counts once)."""
    mode = Mode(mode)
    seen, out = set(), []
    for v in views.values():
        tensors = []
        if mode.uses_corridor and v.corridor is not None:
            tensors += v.corridor.parameters()
        if mode.tunes_head and v.head is not None:
            tensors += list(v.head.values())
        for t in tensors:
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
    return out


def trainable_count(views: Mapping[str, AdaptedPredictor], mode: Mode | str) -> int:
    return int(sum(t.size for t in trainable_parameters(views, mode)))


def expected_trainable_count(mode: Mode | str, shape: GridShape, head_count: int, scenes: int) -> int:
    mode = Mode(mode)
    hw = shape.h + shape.w
    return {
        Mode.LC: scenes * hw,
        Mode.LC_JOINT_FT: scenes * hw + head_count,
        Mode.LC_PER_SCENE_FT: scenes * (hw + head_count),
        Mode.FINETUNE_ONLY: scenes * head_count,
    }[mode]


def scene_seed(seed: int, scene: str) -> int:
    """Per-scene stream, independent of which other scenes are adapted alongside."""
    return (seed * 1_000_003 + zlib.crc32(scene.encode("utf-8"))) % (2 ** 32)


# ---------------------------------------------------------------- training loops

def _train_with_prompts(base: Predictor, windows: Sequence[TrajectoryWindow], segs: Mapping[str, np.ndarray],
                        corridors: Mapping[str, LatentCorridor], head: dict[str, ag.Tensor] | None,
                        cfg: AdaptationConfig, rng: np.random.Generator) -> list[float]:
    opts = []
    prompt_params = [t for c in corridors.values() for t in c.parameters()]
    if prompt_params:
        opts.append(ag.Adam(prompt_params, cfg.prompt_lr))
    if head is not None:
        opts.append(ag.Adam(list(head.values()), cfg.head_lr))
    curve = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in iterate_batches(len(windows), cfg.batch_size, rng):
            batch = [windows[i] for i in idx]
            x, y = encode_batch(batch, segs, base.shape, cfg.sigma)
            for opt in opts:
                opt.zero_grad()
            with ag.Tape() as tape:
                prompt = None
                if corridors:
                    grids = {s: materialize_tensor(corridors[s]) for s in sorted({w.scene for w in batch})}
                    prompt = grids[batch[0].scene] if len(grids) == 1 \
                        else ag.stack([grids[w.scene] for w in batch])
                value = ag.bce_with_logits_sum(forward_batch(base, x, prompt, cfg.apply_mode, head), y)
                tape.backward(value)
            for opt in opts:
                opt.step()
            total += value.item()
        curve.append(total / len(windows))
    return curve


def _train_head_on_features(base: Predictor, windows: Sequence[TrajectoryWindow],
                            segs: Mapping[str, np.ndarray], head: dict[str, ag.Tensor],
                            cfg: AdaptationConfig, rng: np.random.Generator) -> list[float]:
    # encoder and decoder are frozen and there is no prompt: features are constant
    feats, targets = [], []
    for lo in range(0, len(windows), 64):
        x, y = encode_batch(windows[lo:lo + 64], segs, base.shape, cfg.sigma)
        feats.append(features(base, ag.Tensor(x)).data)
        targets.append(y)
    feat, target = np.concatenate(feats, axis=1), np.concatenate(targets, axis=1)
    opt = ag.Adam(list(head.values()), cfg.head_lr)
    curve = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in iterate_batches(len(windows), cfg.batch_size, rng):
            opt.zero_grad()
            with ag.Tape() as tape:
                value = ag.bce_with_logits_sum(head_logits(ag.Tensor(feat[:, idx]), head), target[:, idx])
                tape.backward(value)
            opt.step()
            total += value.item()
        curve.append(total / len(windows))
    return curve


def _adapt_one(base: Predictor, scene: str, windows, seg, cfg: AdaptationConfig) -> AdaptedPredictor:
    seed = scene_seed(cfg.seed, scene)
    rng = np.random.default_rng(seed)
    corridor = init_corridor(base.shape, seed, scene) if cfg.mode.uses_corridor else None
    head = base.copy_head() if cfg.mode.tunes_head else None
    segs = {scene: seg}
    if corridor is None:
        curve = _train_head_on_features(base, windows, segs, head, cfg, rng)
    else:
        curve = _train_with_prompts(base, windows, segs, {scene: corridor}, head, cfg, rng)
    return AdaptedPredictor(base, scene, corridor, head, cfg.apply_mode, curve)


def adapt(base: Predictor, scenes: Mapping[str, SplitDataset], segs: Mapping[str, np.ndarray],
          cfg: AdaptationConfig, workers: int = 1) -> dict[str, AdaptedPredictor]:
    """Adapt a frozen base to each scene; returns one predictor view per scene.

    ``segs`` maps scene id to its (C, h, w) one-hot segmentation.
    """
    for name, split in scenes.items():
        if not split.train_windows:
            raise ValueError(f"scene {name!r} has no training windows at fraction m={cfg.fraction}")
    saved_flags = dict(base.frozen)
    base.freeze_all()
    try:
        names = sorted(scenes)
        if cfg.mode is Mode.LC_JOINT_FT:
            seed = cfg.seed
            rng = np.random.default_rng(seed)
            corridors = {s: init_corridor(base.shape, scene_seed(seed, s), s) for s in names}
            head = base.copy_head()
            pooled = [w for s in names for w in scenes[s].train_windows]
            curve = _train_with_prompts(base, pooled, segs, corridors, head, cfg, rng)
            return {s: AdaptedPredictor(base, s, corridors[s], head, cfg.apply_mode, curve) for s in names}
        jobs = [(s, scenes[s].train_windows, segs[s]) for s in names]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                views = list(pool.map(lambda job: _adapt_one(base, *job, cfg), jobs))
        else:
            views = [_adapt_one(base, *job, cfg) for job in jobs]
        return {v.scene: v for v in views}
    finally:
        for part in PARTS:
            base.set_frozen(part, saved_flags[part])


# ---------------------------------------------------------------- corridor store

def save_corridors(path, views: Mapping[str, AdaptedPredictor]):
    """Corridors as ``<scene>:u`` / ``<scene>:v``; tuned heads as ``<scene>:head.<name>``.

    A head shared by several scenes is written once under ``*shared*:head.<name>``.
    """
    tensors: dict[str, np.ndarray] = {}
    head_owner: dict[int, list[str]] = {}
    for s in sorted(views):
        if views[s].head is not None:
            head_owner.setdefault(id(views[s].head), []).append(s)
    for s in sorted(views):
        v = views[s]
        if v.corridor is not None:
            tensors[f"{s}:u"] = v.corridor.u.data
            tensors[f"{s}:v"] = v.corridor.v.data
        if v.head is not None:
            owners = head_owner[id(v.head)]
            key = s if len(owners) == 1 else "*shared*"
            if len(owners) == 1 or s == owners[0]:
                for name, t in sorted(v.head.items()):
                    tensors[f"{key}:head.{name}"] = t.data
    ag.save_tensors(path, tensors)


def load_corridors(path, base: Predictor, apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS,
                   ) -> dict[str, AdaptedPredictor]:
    tensors = ag.load_tensors(path)
    per: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        scene, name = key.split(":", 1)
        per.setdefault(scene, {})[name] = arr
    shared = per.pop("*shared*", None)
    shared_head = None
    if shared is not None:
        shared_head = {n[5:]: ag.Tensor(a, True, n) for n, a in shared.items()}
    views = {}
    for scene, items in sorted(per.items()):
        corridor = None
        if "u" in items:
            corridor = LatentCorridor(scene, ag.Tensor(items["u"], True), ag.Tensor(items["v"], True))
        head = {n[5:]: ag.Tensor(a, True, n) for n, a in items.items() if n.startswith("head.")} or shared_head
        views[scene] = AdaptedPredictor(base, scene, corridor, head, ApplyMode(apply_mode))
    return views
