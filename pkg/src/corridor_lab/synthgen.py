"""Synthetic scenes and a goal/field/repulsion pedestrian integrator.

The generated motion is deliberately simple: each agent heads for a goal,
is pushed along an optional per-pixel preferred-direction field, and is
repelled from obstacle rectangles. A scene-specific field is the hidden
behaviour pattern that adaptation is supposed to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import GridShape, Tracklet
from .ingest import DEFAULT_CLASSES, SceneContext, SceneEntry, write_mot_gt, write_scene_manifest, \
    write_segmentation_grid

WALKABLE, OBSTACLE = 0, 1


@dataclass(frozen=True)
class Rect:
    """Pixel rectangle: rows [r0, r1), cols [c0, c1)."""

    r0: int
    c0: int
    r1: int
    c1: int

    def contains(self, x: float, y: float) -> bool:
        r, c = int(np.floor(y + 0.5)), int(np.floor(x + 0.5))
        return self.r0 <= r < self.r1 and self.c0 <= c < self.c1

    def nearest(self, x: float, y: float) -> tuple[float, float]:
        # continuous extent of the covered pixels
        return (min(max(x, self.c0 - 0.5), self.c1 - 0.5), min(max(y, self.r0 - 0.5), self.r1 - 0.5))


@dataclass
class SceneSpec:
    shape: GridShape
    obstacles: list[Rect] = field(default_factory=list)
    corridor_field: np.ndarray | None = None  # (h, w, 2) of (dx, dy)
    goals: list[tuple[float, float]] = field(default_factory=list)
    seed: int = 0
    name: str = "synth"
    spawns: list[tuple[float, float]] = field(default_factory=list)
    beta: float = 1.5
    speed: float = 1.2
    noise: float = 0.15
    repulsion_radius: float = 2.5
    repulsion_gain: float = 2.0

    def __post_init__(self):
        for o in self.obstacles:
            if not (0 <= o.r0 < o.r1 <= self.shape.h and 0 <= o.c0 < o.c1 <= self.shape.w):
                raise ValueError(f"obstacle {o} outside {self.shape.h}x{self.shape.w} grid")
        if self.corridor_field is not None:
            f = np.asarray(self.corridor_field, dtype=np.float64)
            if f.shape != (self.shape.h, self.shape.w, 2) or not np.all(np.isfinite(f)):
                raise ValueError("corridor_field must be a finite (h, w, 2) array")
            self.corridor_field = f


def generate_scene(spec: SceneSpec, classes: int = DEFAULT_CLASSES, fps: float = 2.0) -> SceneContext:
    labels = np.full((spec.shape.h, spec.shape.w), WALKABLE, dtype=np.int64)
    for o in spec.obstacles:
        labels[o.r0:o.r1, o.c0:o.c1] = OBSTACLE
    if not (labels == WALKABLE).any():
        raise ValueError(f"scene {spec.name}: obstacles cover the whole grid")
    return SceneContext(spec.name, spec.shape, classes, labels, fps)


def _blocked(spec: SceneSpec, x: float, y: float) -> bool:
    return any(o.contains(x, y) for o in spec.obstacles)


def _field_at(spec: SceneSpec, x: float, y: float) -> np.ndarray:
    if spec.corridor_field is None:
        return np.zeros(2)
    r = min(max(int(np.floor(y + 0.5)), 0), spec.shape.h - 1)
    c = min(max(int(np.floor(x + 0.5)), 0), spec.shape.w - 1)
    return spec.corridor_field[r, c]


def _repulsion(spec: SceneSpec, x: float, y: float) -> np.ndarray:
    force = np.zeros(2)
    for o in spec.obstacles:
        nx, ny = o.nearest(x, y)
        d = np.hypot(x - nx, y - ny)
        if 1e-9 < d < spec.repulsion_radius:
            force += spec.repulsion_gain * (spec.repulsion_radius - d) / spec.repulsion_radius \
                * np.array([x - nx, y - ny]) / d
    return force


def _border_point(rng: np.random.Generator, shape: GridShape) -> tuple[float, float]:
    side = rng.integers(4)
    if side == 0:
        return 0.0, float(rng.uniform(0, shape.h - 1))
    if side == 1:
        return float(shape.w - 1), float(rng.uniform(0, shape.h - 1))
    if side == 2:
        return float(rng.uniform(0, shape.w - 1)), 0.0
    return float(rng.uniform(0, shape.w - 1)), float(shape.h - 1)


def _inside(shape: GridShape, x: float, y: float) -> bool:
    return -0.5 <= x < shape.w - 0.5 and -0.5 <= y < shape.h - 0.5


def simulate_pedestrians(spec: SceneSpec, n_agents: int, duration: float, rate: float = 2.0,
                         spawn_interval: float | None = None) -> list[Tracklet]:
    """Integrate ``n_agents`` walkers for ``duration`` seconds at ``rate`` steps per second.

    Agent ``i`` appears at step ``i * spawn_interval`` (default: spread over the
    first 60% of the run), so identity order equals appearance order. An agent
    stops being recorded once it leaves the grid or comes within one step of
    its goal.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    rng = np.random.default_rng(spec.seed)
    n_steps = int(round(duration * rate))
    if spawn_interval is None:
        spawn_interval = max(1.0, 0.6 * n_steps / n_agents)
    goals = spec.goals or [(spec.shape.w - 1.0, spec.shape.h / 2.0)]

    tracks = []
    for i in range(n_agents):
        if spec.spawns:
            pos = np.array(spec.spawns[i % len(spec.spawns)], dtype=np.float64)
        else:
            pos = np.array(_border_point(rng, spec.shape))
            for _ in range(50):
                if not _blocked(spec, *pos):
                    break
                pos = np.array(_border_point(rng, spec.shape))
        # farthest goals are preferred so walks cross the scene
        dists = [np.hypot(g[0] - pos[0], g[1] - pos[1]) for g in goals]
        far = [g for g, d in zip(goals, dists) if d >= 0.5 * max(dists)]
        goal = np.array(far[rng.integers(len(far))], dtype=np.float64)
        start = int(np.floor(i * spawn_interval))
        if start >= n_steps or _blocked(spec, *pos):
            continue
        samples = [(start, pos[0], pos[1])]
        for step in range(start + 1, n_steps):
            to_goal = goal - pos
            dist = np.hypot(*to_goal)
            if dist < spec.speed:
                break
            heading = to_goal / dist
            drift = spec.beta * _field_at(spec, *pos)
            # the field bends paths but never pushes a walker back from its goal
            drift = drift - min(0.0, float(drift @ heading)) * heading
            desired = heading + drift + _repulsion(spec, *pos)
            norm = np.hypot(*desired)
            vel = desired / norm * spec.speed if norm > 1e-12 else np.zeros(2)
            if spec.noise > 0:
                vel = vel + rng.normal(0.0, spec.noise, size=2)
            nxt = pos + vel
            if _blocked(spec, *nxt):
                # reflect the offending component, then give up and stand still
                for flip in (np.array([-1.0, 1.0]), np.array([1.0, -1.0]), np.array([-1.0, -1.0])):
                    cand = pos + vel * flip
                    if not _blocked(spec, *cand):
                        nxt = cand
                        break
                else:
                    nxt = pos.copy()
            if not _inside(spec.shape, *nxt):
                break
            pos = nxt
            samples.append((step, pos[0], pos[1]))
        tracks.append(Tracklet(i, spec.name, np.array(samples), float(rate)))
    return tracks


def write_synthetic_scene(out_dir, spec: SceneSpec, tracklets: Sequence[Tracklet], role: str = "deploy",
                          classes: int = DEFAULT_CLASSES, rate: float = 2.0) -> SceneEntry:
    """Write one scene's gt and segmentation files; returns its manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = generate_scene(spec, classes, rate)
    gt, seg = out_dir / f"{spec.name}.gt.txt", out_dir / f"{spec.name}.seg.txt"
    write_mot_gt(gt, tracklets)
    write_segmentation_grid(seg, ctx)
    return SceneEntry(spec.name, gt, seg, rate, None, role)


# ---------------------------------------------------------------- scene families

def _corner_goals(shape: GridShape) -> list[tuple[float, float]]:
    h, w = shape.h, shape.w
    return [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0),
            (0.0, (h - 1) / 2.0), (w - 1.0, (h - 1) / 2.0), ((w - 1) / 2.0, 0.0), ((w - 1) / 2.0, h - 1.0)]


def random_obstacles(rng: np.random.Generator, shape: GridShape, count: int) -> list[Rect]:
    out = []
    for _ in range(count):
        rh = int(rng.integers(2, max(3, shape.h // 6)))
        rw = int(rng.integers(2, max(3, shape.w // 6)))
        r0 = int(rng.integers(shape.h // 5, shape.h - shape.h // 5 - rh))
        c0 = int(rng.integers(shape.w // 5, shape.w - shape.w // 5 - rw))
        out.append(Rect(r0, c0, r0 + rh, c0 + rw))
    return out


def band_field(shape: GridShape, rows: tuple[int, int] | None, cols: tuple[int, int] | None,
               direction: tuple[float, float]) -> np.ndarray:
    """Unit-direction field active inside a row band and/or column band (their union)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.hypot(*d)
    mask = np.zeros((shape.h, shape.w), dtype=bool)
    if rows is not None:
        mask[rows[0]:rows[1], :] = True
    if cols is not None:
        mask[:, cols[0]:cols[1]] = True
    f = np.zeros((shape.h, shape.w, 2))
    f[mask] = d
    return f


def pretrain_scene_spec(shape: GridShape, seed: int, name: str, obstacles: int = 2) -> SceneSpec:
    rng = np.random.default_rng(seed)
    return SceneSpec(shape, random_obstacles(rng, shape, obstacles), None, _corner_goals(shape),
                     seed=seed, name=name)


def attractor_field(shape: GridShape, centre: tuple[float, float], radius: float) -> np.ndarray:
    """Field pointing at ``centre`` (x, y): magnitude grows to 1 at ``radius`` and ends at ``3 * radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    ys, xs = np.mgrid[0:shape.h, 0:shape.w].astype(np.float64)
    d = np.stack([centre[0] - xs, centre[1] - ys], axis=-1)
    dist = np.hypot(d[..., 0], d[..., 1])
    mag = np.minimum(dist / radius, 1.0) * (dist <= 3 * radius)
    return d * (mag / np.maximum(dist, 1e-12))[..., None]


def biased_scene_spec(shape: GridShape, seed: int, name: str, obstacles: int = 1,
                      beta: float = 4.0) -> SceneSpec:
    """A deployment scene with a hidden attractor (think of a stairway) that bends nearby paths."""
    rng = np.random.default_rng(seed)
    centre = (float(rng.uniform(0.3, 0.7) * shape.w), float(rng.uniform(0.3, 0.7) * shape.h))
    field_ = attractor_field(shape, centre, min(shape.h, shape.w) / 6)
    return SceneSpec(shape, random_obstacles(rng, shape, obstacles), field_, _corner_goals(shape),
                     seed=seed, name=name, beta=beta)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    context: SceneContext
    tracklets: list[Tracklet]
    role: str


def synthetic_suite(shape: GridShape, pretrain_scenes: int, deploy_scenes: int, agents: int, duration: float,
                    rate: float = 2.0, seed: int = 0, beta: float = 4.0, classes: int = DEFAULT_CLASSES,
                    ) -> list[SyntheticScene]:
    """Bias-free pretraining scenes followed by attractor-field deployment scenes."""
    out = []
    for i in range(pretrain_scenes):
        spec = pretrain_scene_spec(shape, seed * 7919 + i, f"pre{i:02d}")
        out.append(SyntheticScene(spec, generate_scene(spec, classes, rate),
                                  simulate_pedestrians(spec, agents, duration, rate), "pretrain"))
    for i in range(deploy_scenes):
        spec = biased_scene_spec(shape, seed * 7919 + 1000 + i, f"dep{i:02d}", beta=beta)
        out.append(SyntheticScene(spec, generate_scene(spec, classes, rate),
                                  simulate_pedestrians(spec, agents, duration, rate), "deploy"))
    return out
