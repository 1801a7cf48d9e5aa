"""Config-driven pipeline: scenes, base predictor, adaptation sweep, reports.

``run`` is the whole batch job. Every cell of the sweep is
(seed, fraction, mode) and every deploy scene is evaluated on the same
held-out identities regardless of the cell, so rows are directly
comparable.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import MLPConfig, constant_velocity, train_mlp
from .config import RunConfig
from .core import SplitDataset, Tracklet, TrajectoryWindow, WindowSpec, build_windows, chronological_split, \
    downsample_tracklet
from .corridor import AdaptationConfig, AdaptedPredictor, Mode, adapt, base_view
from .ingest import SceneContext, load_scene, read_scene_manifest
from .metrics import Report, evaluate, normalize_curves
from .plots import Series, write_chart
from .predictor import Predictor, TrainConfig, build_model, pretrain
from .synthgen import synthetic_suite

log = logging.getLogger(__name__)

RESULTS_HEADER = ("scene", "mode", "fraction", "person_seconds", "ade", "fde", "n_windows", "seed")
CURVES_HEADER = ("mode", "fraction", "normalized_ade_mean", "normalized_ade_std", "n_scenes", "seed")
MODE_ORDER = ("Base", "ConstantVelocity", "LearnedTrajectory",
              "LC", "LCJointFT", "LCPerSceneFT", "FinetuneOnly")


@dataclass
class Scene:
    context: SceneContext
    tracklets: list[Tracklet]
    role: str

    @property
    def name(self) -> str:
        return self.context.scene


@dataclass(frozen=True)
class ResultRow:
    scene: str
    mode: str
    fraction: float  # percent of identities used for adaptation; 0 for baselines
    person_seconds: float
    ade: float
    fde: float
    n_windows: int
    seed: int

    def sort_key(self):
        return self.seed, self.scene, MODE_ORDER.index(self.mode), self.fraction

    def cells(self) -> list[str]:
        return [self.scene, self.mode, repr(float(self.fraction)), repr(float(self.person_seconds)),
                repr(float(self.ade)), repr(float(self.fde)), str(self.n_windows), str(self.seed)]


@dataclass
class RunResult:
    rows: list[ResultRow]
    curves: list[tuple]
    files: list[Path]
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- scenes and base

def window_spec(cfg: RunConfig) -> WindowSpec:
    s = cfg.scenes
    return WindowSpec(s.hist_len, s.pred_len, s.stride, s.rate)


def prepare_scenes(cfg: RunConfig, seed: int) -> list[Scene]:
    s = cfg.scenes
    if s.source == "synthetic":
        suite = synthetic_suite(cfg.shape, s.pretrain_scenes, s.deploy_scenes, s.agents, s.duration,
                                s.rate, seed, s.bias, s.classes)
        return [Scene(x.context, x.tracklets, x.role) for x in suite]
    manifest = cfg.resolve(s.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"scenes.manifest: {manifest} not found")
    out = []
    for entry in read_scene_manifest(manifest):
        ctx, tracks = load_scene(entry, cfg.shape, s.classes, manifest.parent)
        tracks = [downsample_tracklet(t, s.rate) for t in tracks]
        out.append(Scene(ctx, tracks, entry.role))
    return out


def subsample(windows: Sequence[TrajectoryWindow], cap: int) -> list[TrajectoryWindow]:
    """At most ``cap`` windows, evenly spaced over the chronological order (0 = keep all)."""
    if cap <= 0 or len(windows) <= cap:
        return list(windows)
    idx = np.linspace(0, len(windows) - 1, cap).round().astype(int)
    return [windows[i] for i in idx]


def pretrain_windows(cfg: RunConfig, scenes: Sequence[Scene]) -> list[TrajectoryWindow]:
    spec = window_spec(cfg)
    wins = [w for sc in scenes if sc.role == "pretrain" for t in sc.tracklets for w in build_windows(t, spec)]
    return subsample(wins, cfg.model.max_windows)


def load_base(cfg: RunConfig) -> Predictor:
    path = cfg.resolve(cfg.model.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"model.checkpoint: {path} not found")
    base = Predictor.load(path)
    a, s = base.arch, cfg.scenes
    want = (s.grid_h, s.grid_w, s.hist_len, s.pred_len, s.classes)
    got = (a.h, a.w, a.hist_len, a.pred_len, a.classes)
    if want != got:
        raise ValueError(f"model.checkpoint: architecture (h, w, H, T, C) = {got} but config asks for {want}")
    return base


def train_base(cfg: RunConfig, scenes: Sequence[Scene], seed: int) -> tuple[Predictor, list[float]]:
    wins = pretrain_windows(cfg, scenes)
    if not wins:
        raise ValueError("no pretraining windows: add pretrain scenes or set model.checkpoint")
    s, m = cfg.scenes, cfg.model
    base = build_model(cfg.shape, s.hist_len, s.pred_len, s.classes, seed)
    segs = {sc.name: sc.context.seg for sc in scenes}
    curve = pretrain(base, wins, segs, TrainConfig(m.epochs, m.lr, m.batch_size, seed, m.sigma),
                     log=log.info)
    return base, curve


# ---------------------------------------------------------------- sweep

def _report_row(scene: str, mode: str, fraction: float, ps: float, rep: Report, seed: int) -> ResultRow:
    return ResultRow(scene, mode, fraction, ps, rep.ade_mean, rep.fde_mean, rep.n_windows, seed)


def _eval_view(view: AdaptedPredictor, windows, seg, sigma) -> Report:
    return evaluate(lambda ws: view.predict(ws, seg, sigma), windows)


def run_seed(cfg: RunConfig, seed: int, base: Predictor | None = None, threads: int = 1,
             warnings: list[str] | None = None) -> tuple[list[ResultRow], dict]:
    """All rows for one seed, plus a small info dict for the manifest."""
    warnings = warnings if warnings is not None else []
    info: dict = {"seed": seed}
    scenes = prepare_scenes(cfg, seed)
    if base is None:
        if cfg.model.checkpoint:
            base = load_base(cfg)
        else:
            base, curve = train_base(cfg, scenes, seed)
            info["pretrain_loss"] = curve
    spec, sigma = window_spec(cfg), cfg.model.sigma
    deploy = [sc for sc in scenes if sc.role == "deploy"]
    if not deploy:
        raise ValueError("no deploy scenes to adapt to")
    segs = {sc.name: sc.context.seg for sc in scenes}
    fractions = sorted(cfg.sweep.fractions)
    splits = {f: {sc.name: chronological_split(sc.tracklets, f / 100.0, spec) for sc in deploy} for f in fractions}
    # the held-out identities must not depend on the fraction
    test = {sc.name: splits[fractions[-1]][sc.name].test_windows for sc in deploy}
    for f in fractions:
        for sc in deploy:
            if splits[f][sc.name].test_ids != splits[fractions[-1]][sc.name].test_ids:
                raise RuntimeError(f"{sc.name}: test identities changed between fractions")

    rows: list[ResultRow] = []
    baselines = cfg.sweep.baselines
    if "Base" in baselines:
        for sc in deploy:
            rep = _eval_view(base_view(base, sc.name), test[sc.name], segs[sc.name], sigma)
            rows.append(_report_row(sc.name, "Base", 0.0, 0.0, rep, seed))
    if "ConstantVelocity" in baselines:
        for sc in deploy:
            rep = evaluate(lambda ws: np.stack([constant_velocity(w) for w in ws]), test[sc.name])
            rows.append(_report_row(sc.name, "ConstantVelocity", 0.0, 0.0, rep, seed))
    if "LearnedTrajectory" in baselines:
        wins = pretrain_windows(cfg, scenes)
        if not wins:
            warnings.append(f"seed {seed}: LearnedTrajectory skipped, no pretraining windows")
        else:
            mlp, _ = train_mlp(wins, MLPConfig(epochs=cfg.sweep.mlp_epochs, seed=seed))
            for sc in deploy:
                rows.append(_report_row(sc.name, "LearnedTrajectory", 0.0, 0.0,
                                        evaluate(mlp.predict_many, test[sc.name]), seed))

    a = cfg.adaptation
    cap = cfg.scenes.max_train_windows
    for f in fractions:
        for mode in a.modes:
            acfg = AdaptationConfig(mode=mode, apply_mode=a.apply_mode, prompt_lr=a.prompt_lr, head_lr=a.head_lr,
                                    epochs=a.epochs, fraction=f / 100.0, seed=seed, batch_size=a.batch_size,
                                    sigma=sigma)
            cell = {}
            for name, sp in splits[f].items():
                if sp.train_windows:
                    cell[name] = SplitDataset(subsample(sp.train_windows, cap), sp.test_windows, sp.train_fraction,
                                              sp.person_seconds_train, sp.train_ids, sp.test_ids)
                else:
                    warnings.append(f"seed {seed}: {name} has no training windows at {f:g}%, {mode} "
                                    f"falls back to the base predictor")
            views = adapt(base, cell, segs, acfg, workers=threads) if cell else {}
            for sc in deploy:
                view = views.get(sc.name) or base_view(base, sc.name)
                rep = _eval_view(view, test[sc.name], segs[sc.name], sigma)
                rows.append(_report_row(sc.name, Mode(mode).value, float(f),
                                        splits[f][sc.name].person_seconds_train, rep, seed))
            log.info("seed %d fraction %g%% %s done", seed, f, mode)
    rows.sort(key=ResultRow.sort_key)
    return rows, info


def normalized_curves(rows: Sequence[ResultRow]) -> list[tuple]:
    """Per (seed, mode): ADE at each fraction divided by the scene's Base ADE, aggregated over scenes."""
    out = []
    for seed in sorted({r.seed for r in rows}):
        mine = [r for r in rows if r.seed == seed]
        base = {r.scene: r.ade for r in mine if r.mode == "Base"}
        if not base:
            continue
        modes = [m for m in MODE_ORDER[3:] if any(r.mode == m for r in mine)]
        for mode in modes:
            curves: dict[str, dict[float, float]] = {}
            for r in mine:
                if r.mode == mode:
                    curves.setdefault(r.scene, {})[r.fraction] = r.ade
            fr, mean, std = normalize_curves(curves, base)
            for f, mu, sd in zip(fr, mean, std):
                out.append((mode, float(f), float(mu), float(sd), len(curves), seed))
    return out


# ---------------------------------------------------------------- outputs

def write_results_csv(path, rows: Sequence[ResultRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow(r.cells())
    return path


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRow(s, m, float(f), float(ps), float(a), float(fd), int(n), int(seed))
                for s, m, f, ps, a, fd, n, seed in reader]


def write_curves_csv(path, curves: Sequence[tuple]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVES_HEADER)
        for mode, f, mu, sd, n, seed in curves:
            w.writerow([mode, repr(f), repr(mu), repr(sd), n, seed])
    return path


def emit_plots(rows: Sequence[ResultRow], curves: Sequence[tuple], out_dir,
               warnings: list[str] | None = None) -> list[Path]:
    """One ADE-vs-person-seconds chart per scene and one normalized aggregate chart."""
    if not rows:
        raise ValueError("emit_plots needs results")
    warnings = warnings if warnings is not None else []
    adapted = [r for r in rows if r.mode in MODE_ORDER[3:]]
    if not adapted:
        warnings.append("no adaptation modes in results: plots skipped")
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for scene in sorted({r.scene for r in adapted}):
        series = []
        for mode in MODE_ORDER[3:]:
            for seed in sorted({r.seed for r in adapted}):
                pts = sorted((r.person_seconds, r.ade) for r in adapted
                             if r.scene == scene and r.mode == mode and r.seed == seed)
                if pts:
                    series.append(Series(f"{mode} s{seed}", [p[0] for p in pts], [p[1] for p in pts]))
        files.append(write_chart(out_dir / f"ade_{scene}.svg", series, f"ADE over adaptation time: {scene}",
                                 "person-seconds observed", "ADE (px)"))
    series = []
    for mode in MODE_ORDER[3:]:
        for seed in sorted({c[5] for c in curves}):
            pts = sorted((c[1], c[2]) for c in curves if c[0] == mode and c[5] == seed)
            if pts:
                series.append(Series(f"{mode} s{seed}", [p[0] for p in pts], [p[1] for p in pts]))
    if series:
        files.append(write_chart(out_dir / "normalized.svg", series, "ADE relative to the frozen base",
                                 "identities used (%)", "ADE / base ADE"))
    return files


def _versions() -> dict:
    return {"corridor_lab": __version__, "numpy": np.__version__, "python": platform.python_version()}


def run(cfg: RunConfig, out_dir=None, seeds: Sequence[int] | None = None, threads: int = 1,
        progress: Callable[[str], None] | None = None) -> RunResult:
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else list(cfg.sweep.seeds)
    warnings: list[str] = []
    base = load_base(cfg) if cfg.model.checkpoint else None
    rows, infos = [], []
    for seed in seeds:
        r, info = run_seed(cfg, seed, base, threads, warnings)
        rows += r
        infos.append(info)
        if progress:
            progress(f"seed {seed}: {len(r)} rows")
    rows.sort(key=ResultRow.sort_key)
    curves = normalized_curves(rows)
    files = [write_results_csv(out / "results.csv", rows), write_curves_csv(out / "normalized_curves.csv", curves)]
    if cfg.output.plots:
        files += emit_plots(rows, curves, out / "plots", warnings)
    manifest = {
        "config_sha256": cfg.digest(),
        "config": cfg.as_dict(),
        "seeds": seeds,
        "threads": threads,
        "versions": _versions(),
        "warnings": warnings,
        "runs": infos,
        "files": [str(p.relative_to(out)) for p in files],
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(rows, curves, files, warnings)
