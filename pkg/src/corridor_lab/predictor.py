"""Heatmap-in, heatmap-out trajectory predictor: encoder, decoder and head.

Layer list (3x3 convs unless noted, leaky ReLU 0.1 after every conv but the head)::

    encoder  e0: H+C -> 16         @ h x w
             e1: 16  -> 32         @ h/2 x w/2   (after 2x2 average pool)
             e2: 32  -> 64         @ h/4 x w/4   (after 2x2 average pool)
             e3: 64  -> 64         @ h/4 x w/4
    decoder  d1: 64+32 -> 32       @ h/2 x w/2   (bilinear x2 up, skip from e1)
             d0: 32+16 -> 16       @ h x w       (bilinear x2 up, skip from e0)
    head     p:  16 -> T, 1x1 conv @ h x w
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .core import GridShape, TrajectoryWindow
from .heatmap import DEFAULT_BETA, DEFAULT_SIGMA, ObservationStack, decode_prediction, trajectory_to_heatmaps
from .prompting import ApplyMode, apply_prompt_batch

PARTS = ("encoder", "decoder", "head")
WIDTHS = (16, 32, 64)
LEAK = 0.1


@dataclass(frozen=True)
class ArchConfig:
    h: int
    w: int
    hist_len: int
    pred_len: int
    classes: int
    seed: int = 0

    @property
    def shape(self) -> GridShape:
        return GridShape(self.h, self.w)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or self.sigma <= 0 or self.beta <= 0:
            raise ValueError(f"invalid training config: {self}")


def layer_list(arch: ArchConfig) -> list[tuple[str, str, int, int, int]]:
    """(part, name, in_channels, out_channels, kernel) for every layer."""
    c1, c2, c3 = WIDTHS
    return [
        ("encoder", "e0", arch.hist_len + arch.classes, c1, 3),
        ("encoder", "e1", c1, c2, 3),
        ("encoder", "e2", c2, c3, 3),
        ("encoder", "e3", c3, c3, 3),
        ("decoder", "d1", c3 + c2, c2, 3),
        ("decoder", "d0", c2 + c1, c1, 3),
        ("head", "p", c1, arch.pred_len, 1),
    ]


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + LEAK ** 2))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class Predictor:
    def __init__(self, arch: ArchConfig, params: Mapping[str, Mapping[str, ag.Tensor]]):
        self.arch = arch
        self.params = {part: dict(params[part]) for part in PARTS}
        self.frozen = {part: False for part in PARTS}

    @property
    def shape(self) -> GridShape:
        return self.arch.shape

    def set_frozen(self, part: str, frozen: bool = True):
        if part not in PARTS:
            raise KeyError(part)
        self.frozen[part] = frozen
        for t in self.params[part].values():
            t.requires_grad = not frozen

    def freeze_all(self):
        for part in PARTS:
            self.set_frozen(part, True)

    def part_count(self, part: str) -> int:
        return int(sum(t.size for t in self.params[part].values()))

    @property
    def param_count(self) -> int:
        return sum(self.part_count(p) for p in PARTS)

    def trainable(self) -> list[ag.Tensor]:
        return [t for part in PARTS if not self.frozen[part] for t in self.params[part].values()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{part}.{name}": t.data for part in PARTS for name, t in sorted(self.params[part].items())}

    def copy_head(self) -> dict[str, ag.Tensor]:
        return {k: ag.Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params["head"].items()}

    def save(self, path):
        path = Path(path)
        ag.save_tensors(path, self.state_dict())
        manifest = {"architecture": asdict(self.arch), "param_count": self.param_count,
                    "layers": [list(layer) for layer in layer_list(self.arch)]}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Predictor":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not path.exists() or not meta_path.exists():
            raise FileNotFoundError(f"checkpoint {path} (with manifest {meta_path.name}) not found")
        arch = ArchConfig(**json.loads(meta_path.read_text())["architecture"])
        tensors = ag.load_tensors(path)
        params = {part: {} for part in PARTS}
        for key, arr in tensors.items():
            part, name = key.split(".", 1)
            params[part][name] = ag.Tensor(arr, requires_grad=True, name=key)
        return cls(arch, params)


def build_model(shape: GridShape, hist_len: int, pred_len: int, classes: int, seed: int = 0) -> Predictor:
    if shape.h % 4 or shape.w % 4:
        raise ValueError(f"grid {shape.h}x{shape.w} must be divisible by 4 for two pooling levels")
    arch = ArchConfig(shape.h, shape.w, hist_len, pred_len, classes, seed)
    rng = np.random.default_rng(seed)
    params = {part: {} for part in PARTS}
    for part, name, cin, cout, k in layer_list(arch):
        wshape = (cout, cin, 3, 3) if k == 3 else (cout, cin)
        params[part][f"{name}.weight"] = ag.Tensor(_kaiming(rng, wshape, cin * k * k), True, f"{part}.{name}.weight")
        params[part][f"{name}.bias"] = ag.Tensor(np.zeros(cout), True, f"{part}.{name}.bias")
    return Predictor(arch, params)


# ---------------------------------------------------------------- forward

def _conv(x, layer: Mapping[str, ag.Tensor], name: str):
    return ag.leaky_relu(ag.conv2d(x, layer[f"{name}.weight"], layer[f"{name}.bias"]), LEAK)


def features(model: Predictor, x: ag.Tensor) -> ag.Tensor:
    """Encoder + decoder on a (H + C, N, h, w) batch -> (16, N, h, w)."""
    enc, dec = model.params["encoder"], model.params["decoder"]
    s0 = _conv(x, enc, "e0")
    s1 = _conv(ag.avg_pool2(s0), enc, "e1")
    b = _conv(ag.avg_pool2(s1), enc, "e2")
    b = _conv(b, enc, "e3")
    u1 = _conv(ag.concat_channels([ag.bilinear_up2(b), s1]), dec, "d1")
    return _conv(ag.concat_channels([ag.bilinear_up2(u1), s0]), dec, "d0")


def head_logits(feat: ag.Tensor, head: Mapping[str, ag.Tensor]) -> ag.Tensor:
    return ag.conv2d_1x1(feat, head["p.weight"], head["p.bias"])


def forward_batch(model: Predictor, x, prompt=None, apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS,
                  head: Mapping[str, ag.Tensor] | None = None) -> ag.Tensor:
    """Logits (T, N, h, w) for a batch. ``prompt`` is (h, w) or (N, h, w)."""
    x = ag.as_tensor(x)
    a = model.arch
    if x.data.ndim != 4 or x.shape[0] != a.hist_len + a.classes or x.shape[2:] != (a.h, a.w):
        raise ValueError(f"input {x.shape} does not match model ({a.hist_len + a.classes}, N, {a.h}, {a.w})")
    if prompt is not None:
        x = apply_prompt_batch(x, ag.as_tensor(prompt), apply_mode, a.hist_len)
    return head_logits(features(model, x), head if head is not None else model.params["head"])


def forward(model: Predictor, obs: ObservationStack, prompt: np.ndarray | None = None,
            apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS) -> np.ndarray:
    if obs.channels != model.arch.hist_len + model.arch.classes:
        raise ValueError(f"observation has {obs.channels} channels, model expects "
                         f"{model.arch.hist_len + model.arch.classes}")
    return forward_batch(model, obs.stacked()[:, None], prompt, apply_mode).data[:, 0]


# ---------------------------------------------------------------- batches and loss

def encode_batch(windows: Sequence[TrajectoryWindow], segs: Mapping[str, np.ndarray], shape: GridShape,
                 sigma: float = DEFAULT_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """Inputs (H + C, N, h, w) and targets (T, N, h, w) for a list of windows."""
    xs = [np.concatenate([trajectory_to_heatmaps(w.past, shape, sigma), segs[w.scene]]) for w in windows]
    ys = [trajectory_to_heatmaps(w.future, shape, sigma) for w in windows]
    return np.stack(xs, axis=1), np.stack(ys, axis=1)


def loss(model: Predictor, window: TrajectoryWindow, seg: np.ndarray, prompt=None,
         apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS, sigma: float = DEFAULT_SIGMA) -> float:
    x, y = encode_batch([window], {window.scene: seg}, model.shape, sigma)
    return ag.bce_with_logits_sum(forward_batch(model, x, prompt, apply_mode), y).item()


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def pretrain(model: Predictor, windows: Sequence[TrajectoryWindow], segs: Mapping[str, np.ndarray],
             config: TrainConfig, log=None) -> list[float]:
    """Mini-batch Adam on the summed heatmap BCE. Returns mean loss per window for each epoch."""
    if not windows:
        raise ValueError("pretrain needs at least one training window")
    rng = np.random.default_rng(config.seed)
    params = model.trainable()
    opt = ag.Adam(params, config.lr)
    curve = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in iterate_batches(len(windows), config.batch_size, rng):
            x, y = encode_batch([windows[i] for i in idx], segs, model.shape, config.sigma)
            opt.zero_grad()
            with ag.Tape() as tape:
                value = ag.bce_with_logits_sum(forward_batch(model, x), y)
                tape.backward(value)
            opt.step()
            total += value.item()
        curve.append(total / len(windows))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} loss {curve[-1]:.3f}")
    return curve


def predict_logits(model: Predictor, windows: Sequence[TrajectoryWindow], segs: Mapping[str, np.ndarray],
                   prompt=None, apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS,
                   head: Mapping[str, ag.Tensor] | None = None, sigma: float = DEFAULT_SIGMA,
                   batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(windows), batch_size):
        x, _ = encode_batch(windows[lo:lo + batch_size], segs, model.shape, sigma)
        out.append(forward_batch(model, x, prompt, apply_mode, head).data)
    return np.concatenate(out, axis=1)


def predict_points(model: Predictor, window: TrajectoryWindow, seg: np.ndarray, prompt=None,
                   apply_mode: ApplyMode | str = ApplyMode.SUM_ALL_HEATMAPS, sigma: float = DEFAULT_SIGMA,
                   beta: float = DEFAULT_BETA, head: Mapping[str, ag.Tensor] | None = None) -> np.ndarray:
    logits = predict_logits(model, [window], {window.scene: seg}, prompt, apply_mode, head, sigma)
    return decode_prediction(logits[:, 0], beta)
