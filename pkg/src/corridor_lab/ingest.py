"""Readers and writers for MOTChallenge ground truth and segmentation grid files."""

from __future__ import annotations

import configparser
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import GridShape, Tracklet

DEFAULT_CLASSES = 12


class ParseError(ValueError):
    pass


@dataclass
class SceneContext:
    scene: str
    shape: GridShape
    classes: int
    labels: np.ndarray  # (h, w) ints in [0, classes)
    fps: float = 2.0

    def __post_init__(self):
        if self.labels.shape != (self.shape.h, self.shape.w):
            raise ValueError(f"scene {self.scene}: label grid {self.labels.shape} != {self.shape}")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.classes:
            raise ValueError(f"scene {self.scene}: labels outside [0, {self.classes})")

    @property
    def seg(self) -> np.ndarray:
        """One-hot (C, h, w) occupancy."""
        return one_hot(self.labels, self.classes)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return (labels[None, :, :] == np.arange(classes)[:, None, None]).astype(np.float64)


# ---------------------------------------------------------------- MOT gt

def parse_mot_gt(lines: Iterable[str], fps: float, scene: str) -> list[Tracklet]:
    rows: dict[int, dict[int, tuple[float, float]]] = defaultdict(dict)
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < 6:
            raise ParseError(f"line {lineno}: expected at least 6 fields, got {len(fields)}")
        try:
            frame = int(float(fields[0]))
            ident = int(float(fields[1]))
            left, top, width, height = (float(v) for v in fields[2:6])
            conf = float(fields[6]) if len(fields) > 6 and fields[6].strip() else None
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if frame < 1:
            raise ParseError(f"line {lineno}: frame numbers are 1-based, got {frame}")
        if conf == 0:
            continue
        if frame - 1 in rows[ident]:
            raise ParseError(f"line {lineno}: duplicate record for frame {frame}, id {ident}")
        rows[ident][frame - 1] = (left + width / 2.0, top + height / 2.0)

    out = []
    for ident in sorted(rows):
        per = rows[ident]
        if not per:
            continue
        frames = sorted(per)
        samples = np.array([(f, *per[f]) for f in frames], dtype=np.float64)
        out.append(Tracklet(ident, scene, samples, float(fps)))
    return out


def read_mot_gt(path, fps: float, scene: str) -> list[Tracklet]:
    with open(path, encoding="utf-8") as fh:
        return parse_mot_gt(fh, fps, scene)


def _box_corner(center: float, size: float) -> float:
    """A corner c with c + size/2 == center exactly in float64, when one exists nearby."""
    c = center - size / 2.0
    for cand in (c, np.nextafter(c, np.inf), np.nextafter(c, -np.inf)):
        if cand + size / 2.0 == center:
            return float(cand)
    return c


def format_mot_gt(tracklets: Sequence[Tracklet], box: float = 1.0) -> str:
    """Serialise tracklets as MOT rows with ``box``-sized boxes centred on each point."""
    records = []
    for t in tracklets:
        for frame, x, y in t.samples:
            records.append((int(frame) + 1, t.identity, float(_box_corner(x, box)), float(_box_corner(y, box))))
    records.sort()
    box = float(box)
    return "".join(f"{f},{i},{left!r},{top!r},{box!r},{box!r},1,-1,-1,-1\n" for f, i, left, top in records)


def write_mot_gt(path, tracklets: Sequence[Tracklet]):
    Path(path).write_text(format_mot_gt(tracklets), encoding="utf-8")


# ---------------------------------------------------------------- segmentation grids

def parse_label_grid(text: str) -> tuple[np.ndarray, int]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty segmentation file")
    try:
        h, w, c = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("line 1: expected 'h w C'") from None
    if len(lines) - 1 != h:
        raise ParseError(f"expected {h} grid rows, found {len(lines) - 1}")
    grid = np.empty((h, w), dtype=np.int64)
    for r, ln in enumerate(lines[1:]):
        vals = ln.split()
        if len(vals) != w:
            raise ParseError(f"line {r + 2}: expected {w} labels, found {len(vals)}")
        try:
            grid[r] = [int(v) for v in vals]
        except ValueError:
            raise ParseError(f"line {r + 2}: non-integer label") from None
    return grid, c


def load_segmentation_grid(path, shape: GridShape, classes: int = DEFAULT_CLASSES, scene: str | None = None,
                           fps: float = 2.0, mapping: Mapping[int, int] | None = None) -> SceneContext:
    grid, _file_classes = parse_label_grid(Path(path).read_text(encoding="utf-8"))
    if grid.shape != (shape.h, shape.w):
        raise ValueError(f"{path}: grid is {grid.shape[0]}x{grid.shape[1]}, expected {shape.h}x{shape.w}")
    if mapping is not None:
        grid = class_downmap(grid, mapping)
    bad = (grid < 0) | (grid >= classes)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"{path}: label {grid[r, c]} at row {r}, col {c} outside [0, {classes})")
    return SceneContext(scene or Path(path).stem, shape, classes, grid, fps)


def format_label_grid(labels: np.ndarray, classes: int) -> str:
    h, w = labels.shape
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in labels)
    return f"{h} {w} {classes}\n{body}\n"


def write_segmentation_grid(path, ctx: SceneContext):
    Path(path).write_text(format_label_grid(ctx.labels, ctx.classes), encoding="utf-8")


def class_downmap(labels: np.ndarray, mapping: Mapping[int, int]) -> np.ndarray:
    labels = np.asarray(labels)
    present = np.unique(labels)
    missing = [int(v) for v in present if int(v) not in mapping]
    if missing:
        raise ValueError(f"labels without a mapping: {missing}")
    lut_keys = np.array(sorted(mapping), dtype=np.int64)
    lut_vals = np.array([mapping[k] for k in lut_keys], dtype=np.int64)
    return lut_vals[np.searchsorted(lut_keys, labels)]


def parse_class_map(text: str) -> dict[int, int]:
    """Lines of ``raw = reduced``; '#' starts a comment."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            k, v = (int(p) for p in line.split("="))
        except ValueError:
            raise ParseError(f"class map line {lineno}: expected 'raw = reduced'") from None
        mapping[k] = v
    return mapping


def default_class_map() -> dict[int, int]:
    """Cityscapes train ids (plus 255 = void) folded into 12 pedestrian-relevant classes."""
    text = resources.files("corridor_lab.data").joinpath("class_map_default.txt").read_text(encoding="utf-8")
    return parse_class_map(text)


def rescale_tracklets(tracklets: Sequence[Tracklet], src: GridShape, dst: GridShape) -> list[Tracklet]:
    sx, sy = dst.w / src.w, dst.h / src.h
    out = []
    for t in tracklets:
        s = t.samples.copy()
        s[:, 1] *= sx
        s[:, 2] *= sy
        out.append(Tracklet(t.identity, t.scene, s, t.rate))
    return out


# ---------------------------------------------------------------- scene manifests

@dataclass
class SceneEntry:
    scene: str
    gt: Path
    seg: Path
    fps: float
    source_shape: GridShape | None = None
    role: str = "deploy"
    class_map: str | None = None


MANIFEST_KEYS = {"gt", "seg", "fps", "width", "height", "role", "class_map"}


def read_scene_manifest(path) -> list[SceneEntry]:
    """INI file with one ``[scene:<id>]`` section per scene; paths are relative to the manifest."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    entries = []
    for section in cp.sections():
        if not section.startswith("scene:"):
            raise ParseError(f"{path}: unexpected section [{section}]")
        sid = section.split(":", 1)[1].strip()
        sec = cp[section]
        unknown = set(sec) - MANIFEST_KEYS
        if unknown:
            raise ParseError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
        for key in ("gt", "seg", "fps"):
            if key not in sec:
                raise ParseError(f"{path}: [{section}] missing '{key}'")
        src = None
        if "width" in sec or "height" in sec:
            src = GridShape(int(sec["height"]), int(sec["width"]))
        role = sec.get("role", "deploy")
        if role not in ("pretrain", "deploy"):
            raise ParseError(f"{path}: [{section}] role must be pretrain or deploy")
        entries.append(SceneEntry(sid, path.parent / sec["gt"], path.parent / sec["seg"], float(sec["fps"]),
                                  src, role, sec.get("class_map")))
    return entries


def write_scene_manifest(path, entries: Sequence[SceneEntry]):
    cp = configparser.ConfigParser(interpolation=None)
    base = Path(path).parent
    for e in entries:
        sec = {"gt": _rel(e.gt, base), "seg": _rel(e.seg, base), "fps": repr(float(e.fps)), "role": e.role}
        if e.source_shape is not None:
            sec["width"], sec["height"] = str(e.source_shape.w), str(e.source_shape.h)
        if e.class_map:
            sec["class_map"] = e.class_map
        cp[f"scene:{e.scene}"] = sec
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).relative_to(base))
    except ValueError:
        return str(p)


def resolve_class_map(spec: str | None, manifest_dir: Path) -> dict[int, int] | None:
    if spec is None or spec == "identity":
        return None
    if spec == "default":
        return default_class_map()
    return parse_class_map((manifest_dir / spec).read_text(encoding="utf-8"))


def load_scene(entry: SceneEntry, shape: GridShape, classes: int = DEFAULT_CLASSES,
               manifest_dir: Path | None = None) -> tuple[SceneContext, list[Tracklet]]:
    """Load one manifest scene: segmentation at ``shape``, tracklets rescaled into it."""
    mapping = resolve_class_map(entry.class_map, manifest_dir or entry.seg.parent)
    ctx = load_segmentation_grid(entry.seg, shape, classes, entry.scene, entry.fps, mapping)
    tracks = read_mot_gt(entry.gt, entry.fps, entry.scene)
    if entry.source_shape is not None and entry.source_shape != shape:
        tracks = rescale_tracklets(tracks, entry.source_shape, shape)
    return ctx, tracks
