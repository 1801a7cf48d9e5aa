"""Run configuration: a sectioned key-value file parsed with configparser.

Schema (every key optional unless marked required; unknown sections or keys
are rejected with their ``section.key`` path)::

    [scenes]
    source          = synthetic | manifest      (default synthetic)
    manifest        = path to a scene manifest  (required when source = manifest)
    grid_h, grid_w  = model grid, both divisible by 4        (36, 60)
    classes         = segmentation classes                   (12)
    hist_len        = observed steps                         (8)
    pred_len        = predicted steps                        (12)
    stride          = window stride in samples               (1)
    rate            = resampling rate in Hz                  (2.0)
    pretrain_scenes, deploy_scenes, agents, duration, bias   synthetic generator knobs
    max_train_windows = cap on adaptation windows per cell, 0 = none (0)

    [model]
    checkpoint      = load this base instead of pretraining (path, relative to the config)
    epochs, lr, batch_size, sigma, max_windows

    [adaptation]
    modes           = comma list of LC, LCJointFT, LCPerSceneFT, FinetuneOnly
    apply_mode      = one of the prompting apply modes       (sum_all_heatmaps)
    prompt_lr, head_lr, epochs, batch_size

    [sweep]
    fractions       = comma list of percentages              (2,4,8,16,32,48,64,80)
    seeds           = comma list of ints                     (0)
    baselines       = comma list of Base, ConstantVelocity, LearnedTrajectory
    mlp_epochs      = epochs for the learned trajectory baseline (100)

    [output]
    dir             = output directory, relative to the config (out)
    plots           = true | false                            (true)
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import GridShape
from .corridor import Mode
from .prompting import ApplyMode

BASELINES = ("Base", "ConstantVelocity", "LearnedTrajectory")
DEFAULT_FRACTIONS = (2, 4, 8, 16, 32, 48, 64, 80)


class ConfigError(ValueError):
    pass


@dataclass
class ScenesSection:
    source: str = "synthetic"
    manifest: str = ""
    grid_h: int = 36
    grid_w: int = 60
    classes: int = 12
    hist_len: int = 8
    pred_len: int = 12
    stride: int = 1
    rate: float = 2.0
    pretrain_scenes: int = 6
    deploy_scenes: int = 4
    agents: int = 30
    duration: float = 100.0
    bias: float = 4.0
    max_train_windows: int = 0


@dataclass
class ModelSection:
    checkpoint: str = ""
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    sigma: float = 1.5
    max_windows: int = 0


@dataclass
class AdaptationSection:
    modes: list[str] = field(default_factory=lambda: ["LC", "FinetuneOnly", "LCPerSceneFT"])
    apply_mode: str = ApplyMode.SUM_ALL_HEATMAPS.value
    prompt_lr: float = 1e-2
    head_lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16


@dataclass
class SweepSection:
    fractions: list[float] = field(default_factory=lambda: [float(f) for f in DEFAULT_FRACTIONS])
    seeds: list[int] = field(default_factory=lambda: [0])
    baselines: list[str] = field(default_factory=lambda: list(BASELINES))
    mlp_epochs: int = 100


@dataclass
class OutputSection:
    dir: str = "out"
    plots: bool = True


SECTIONS = {
    "scenes": ScenesSection,
    "model": ModelSection,
    "adaptation": AdaptationSection,
    "sweep": SweepSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    scenes: ScenesSection = field(default_factory=ScenesSection)
    model: ModelSection = field(default_factory=ModelSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def shape(self) -> GridShape:
        return GridShape(self.scenes.grid_h, self.scenes.grid_w)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def as_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _convert(path: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return [int(s) for s in items]
            if default and isinstance(default[0], float):
                return [float(s) for s in items]
            return items
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig(base_dir=Path(base_dir))
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{name}: unknown section (expected one of {', '.join(SECTIONS)})")
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
            setattr(section, key, _convert(f"{name}.{key}", raw, getattr(section, key)))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def _check(ok: bool, path: str, msg: str):
    if not ok:
        raise ConfigError(f"{path}: {msg}")


def validate(cfg: RunConfig):
    s, m, a, w = cfg.scenes, cfg.model, cfg.adaptation, cfg.sweep
    _check(s.source in ("synthetic", "manifest"), "scenes.source", "must be synthetic or manifest")
    _check(s.source != "manifest" or bool(s.manifest), "scenes.manifest", "required when source = manifest")
    for key in ("grid_h", "grid_w"):
        v = getattr(s, key)
        _check(v >= 8 and v % 4 == 0, f"scenes.{key}", f"must be >= 8 and divisible by 4, got {v}")
    _check(s.classes >= 1, "scenes.classes", "must be positive")
    _check(s.hist_len >= 2, "scenes.hist_len", "must be >= 2")
    _check(s.pred_len >= 1, "scenes.pred_len", "must be >= 1")
    _check(s.stride >= 1, "scenes.stride", "must be >= 1")
    _check(s.rate > 0, "scenes.rate", "must be positive")
    _check(s.pretrain_scenes >= 0 and s.deploy_scenes >= 1, "scenes.deploy_scenes", "need at least one deploy scene")
    _check(s.agents >= 1 and s.duration > 0, "scenes.agents", "agents and duration must be positive")
    _check(s.max_train_windows >= 0, "scenes.max_train_windows", "must be >= 0")
    _check(m.epochs >= 0 and m.lr > 0 and m.batch_size >= 1 and m.sigma > 0, "model", "invalid training settings")
    _check(m.max_windows >= 0, "model.max_windows", "must be >= 0")
    for mode in a.modes:
        try:
            Mode(mode)
        except ValueError:
            raise ConfigError(f"adaptation.modes: unknown mode {mode!r}") from None
    try:
        ApplyMode(a.apply_mode)
    except ValueError:
        raise ConfigError(f"adaptation.apply_mode: unknown apply mode {a.apply_mode!r}") from None
    _check(a.prompt_lr > 0 and a.head_lr > 0, "adaptation", "learning rates must be positive")
    _check(a.epochs >= 0 and a.batch_size >= 1, "adaptation", "invalid epochs or batch_size")
    _check(bool(w.fractions), "sweep.fractions", "must not be empty")
    for f in w.fractions:
        _check(0 < f <= 80, "sweep.fractions", f"{f} outside (0, 80]")
    _check(len(set(w.fractions)) == len(w.fractions), "sweep.fractions", "duplicates")
    _check(bool(w.seeds), "sweep.seeds", "must not be empty")
    for b in w.baselines:
        _check(b in BASELINES, "sweep.baselines", f"unknown baseline {b!r}")
    _check(w.mlp_epochs >= 0, "sweep.mlp_epochs", "must be >= 0")


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            if isinstance(value, list):
                value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
