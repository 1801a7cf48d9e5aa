"""``corridor-lab`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, action="append", help="override sweep seeds (repeatable)")
    common.add_argument("--out-dir", type=Path, help="output directory (default: output.dir of the config)")
    common.add_argument("--threads", type=_threads, default=1, help="worker threads for per-scene adaptation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="corridor-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="pretrain (or load), sweep adaptation, write reports")
    r.add_argument("config", type=Path)
    pt = sub.add_parser("pretrain", parents=[common], help="pretrain base predictors only")
    pt.add_argument("config", type=Path)
    g = sub.add_parser("gen-synth", parents=[common], help="write the synthetic scenes and a scene manifest")
    g.add_argument("config", type=Path)
    e = sub.add_parser("eval", parents=[common], help="evaluate a base checkpoint on a scene manifest")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("manifest", type=Path)
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--rate", type=float, default=2.0)
    return p


def _cmd_run(args) -> int:
    from .harness import run

    cfg = load_config(args.config)
    res = run(cfg, args.out_dir, args.seed, args.threads, progress=print)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for f in res.files:
        print(f)
    return 0


def _cmd_pretrain(args) -> int:
    from .harness import prepare_scenes, train_base

    cfg = load_config(args.config)
    out = args.out_dir or cfg.resolve(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seed or cfg.sweep.seeds:
        base, curve = train_base(cfg, prepare_scenes(cfg, seed), seed)
        path = out / f"base_seed{seed}.ckpt"
        base.save(path)
        print(f"{path} final loss {curve[-1]:.4f}" if curve else str(path))
    return 0


def _cmd_gen_synth(args) -> int:
    from .ingest import write_scene_manifest
    from .synthgen import synthetic_suite, write_synthetic_scene

    cfg = load_config(args.config)
    s = cfg.scenes
    out = args.out_dir or cfg.resolve(cfg.output.dir)
    for seed in args.seed or cfg.sweep.seeds:
        target = out / f"scenes_seed{seed}"
        target.mkdir(parents=True, exist_ok=True)
        suite = synthetic_suite(cfg.shape, s.pretrain_scenes, s.deploy_scenes, s.agents, s.duration, s.rate,
                                seed, s.bias, s.classes)
        entries = [write_synthetic_scene(target, x.spec, x.tracklets, x.role, s.classes, s.rate) for x in suite]
        write_scene_manifest(target / "scenes.ini", entries)
        print(target / "scenes.ini")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .baselines import constant_velocity
    from .core import WindowSpec, chronological_split, downsample_tracklet
    from .corridor import base_view
    from .ingest import load_scene, read_scene_manifest
    from .metrics import evaluate
    from .predictor import Predictor

    base = Predictor.load(args.checkpoint)
    a = base.arch
    spec = WindowSpec(a.hist_len, a.pred_len, args.stride, args.rate)
    print("scene,model,ade,fde,n_windows")
    for entry in read_scene_manifest(args.manifest):
        ctx, tracks = load_scene(entry, base.shape, a.classes, args.manifest.parent)
        tracks = [downsample_tracklet(t, args.rate) for t in tracks]
        test = chronological_split(tracks, 0.8, spec).test_windows
        if not test:
            print(f"warning: {entry.scene} has no test windows", file=sys.stderr)
            continue
        view = base_view(base, entry.scene)
        for name, fn in (("Base", lambda ws: view.predict(ws, ctx.seg)),
                         ("ConstantVelocity", lambda ws: np.stack([constant_velocity(w) for w in ws]))):
            rep = evaluate(fn, test)
            print(f"{entry.scene},{name},{rep.ade_mean:.6f},{rep.fde_mean:.6f},{rep.n_windows}")
    return 0


COMMANDS = {"run": _cmd_run, "pretrain": _cmd_pretrain, "gen-synth": _cmd_gen_synth, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"corridor-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
