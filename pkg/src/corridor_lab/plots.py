"""Minimal deterministic SVG line charts.

Each chart embeds its series as ``<!-- data ... -->`` comments so tests and
scripts can read the numbers back without parsing geometry.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 40, 50
AXIS_PAD = 0.05
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class Series:
    label: str
    xs: Sequence[float]
    ys: Sequence[float]


def axis_range(values: Sequence[float], pad: float = AXIS_PAD) -> tuple[float, float]:
    """Data extent widened by ``pad`` of its span on each side (unit span if flat)."""
    lo, hi = min(values), max(values)
    span = hi - lo
    if span == 0:
        span = abs(lo) if lo != 0 else 1.0
    return lo - pad * span, hi + pad * span


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart(series: Sequence[Series], title: str, xlabel: str, ylabel: str) -> str:
    if not series or not any(len(s.xs) for s in series):
        raise ValueError("line_chart needs at least one non-empty series")
    for s in series:
        if len(s.xs) != len(s.ys):
            raise ValueError(f"series {s.label}: {len(s.xs)} x values but {len(s.ys)} y values")
    x0, x1 = axis_range([x for s in series for x in s.xs])
    y0, y1 = axis_range([y for s in series for y in s.ys])
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<!-- axes x={x0!r},{x1!r} y={y0!r},{y1!r} -->",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">{_esc(title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        fx, fy = x0 + (x1 - x0) * k / 4, y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{_fmt(px(fx))}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{fx:.4g}</text>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(py(fy) + 4)}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{fy:.4g}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'font-family="sans-serif" transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pairs = ";".join(f"{x!r},{y!r}" for x, y in zip(s.xs, s.ys))
        out.append(f"<!-- data label={_esc(s.label)} points={pairs} -->")
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN_T + 14 + 18 * i
        out.append(f'<line x1="{WIDTH - MARGIN_R + 10}" y1="{ly}" x2="{WIDTH - MARGIN_R + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN_R + 34}" y="{ly + 4}" font-size="11" '
                   f'font-family="sans-serif">{_esc(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace("--", "- -")


_DATA = re.compile(r"<!-- data label=(.*?) points=(.*?) -->")
_AXES = re.compile(r"<!-- axes x=(.*?),(.*?) y=(.*?),(.*?) -->")


def read_chart(text: str) -> tuple[list[Series], tuple[float, float, float, float]]:
    """Inverse of the embedded comments: the series and the axis box (x0, x1, y0, y1)."""
    series = []
    for label, pairs in _DATA.findall(text):
        pts = [tuple(float(v) for v in p.split(",")) for p in pairs.split(";") if p]
        series.append(Series(label, [p[0] for p in pts], [p[1] for p in pts]))
    m = _AXES.search(text)
    if m is None:
        raise ValueError("no axes comment in chart")
    return series, tuple(float(v) for v in m.groups())


def write_chart(path, series: Sequence[Series], title: str, xlabel: str, ylabel: str) -> Path:
    path = Path(path)
    path.write_text(line_chart(series, title, xlabel, ylabel), encoding="utf-8")
    return path
