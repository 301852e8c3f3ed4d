"""
Static SVG plots written directly as text.

Output depends only on the data: no timestamps, ids or random numbers, and
every number is printed with fixed precision, so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = (56, 20, 24, 44)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        left, right, top, bottom = MARGIN
        self.px0, self.px1 = left, WIDTH - right
        self.py0, self.py1 = HEIGHT - bottom, top

    def x(self, v):
        return self.px0 + (v - self.x0) / (self.x1 - self.x0) * (self.px1 - self.px0)

    def y(self, v):
        return self.py0 + (v - self.y0) / (self.y1 - self.y0) * (self.py1 - self.py0)


def _ticks(lo: float, hi: float, count: int = 5) -> list:
    span = hi - lo
    raw = span / max(count, 1)
    mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=mag)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str, xticks: bool = True) -> list:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="14" text-anchor="middle">{escape(title)}</text>',
           f'<rect x="{ax.px0}" y="{ax.py1}" width="{ax.px1 - ax.px0}" height="{ax.py0 - ax.py1}" '
           'fill="none" stroke="black"/>']
    for v in (_ticks(ax.x0, ax.x1) if xticks else []):
        px = ax.x(v)
        out.append(f'<line x1="{_fmt(px)}" y1="{ax.py0}" x2="{_fmt(px)}" y2="{ax.py0 + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px)}" y="{ax.py0 + 16}" text-anchor="middle">{v:g}</text>')
    for v in _ticks(ax.y0, ax.y1):
        py = ax.y(v)
        out.append(f'<line x1="{ax.px0 - 4}" y1="{_fmt(py)}" x2="{ax.px0}" y2="{_fmt(py)}" stroke="black"/>')
        out.append(f'<text x="{ax.px0 - 6}" y="{_fmt(py + 4)}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{(ax.px0 + ax.px1) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{(ax.py0 + ax.py1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(ax.py0 + ax.py1) / 2:.1f})">{escape(ylabel)}</text>')
    return out


def _legend(labels: Sequence[str]) -> list:
    out = []
    for k, label in enumerate(labels):
        y = MARGIN[2] + 14 + 14 * k
        x = WIDTH - MARGIN[1] - 120
        out.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 16}" y2="{y - 4}" '
                   f'stroke="{COLORS[k % len(COLORS)]}" stroke-width="2"/>')
        out.append(f'<text x="{x + 20}" y="{y}">{escape(label)}</text>')
    return out


def edc_overlay(curves: Sequence[np.ndarray], labels: Sequence[str], sample_rate_hz: int,
                title: str = "Energy decay", floor_db: float = -80.0, max_points: int = 400) -> str:
    """Decay curves (linear energy, normalized) in dB against time."""
    dur = max(c.size for c in curves) / sample_rate_hz
    ax = _Axes((0.0, dur), (floor_db, 0.0))
    out = _frame(ax, title, "time (s)", "EDC (dB)")
    for k, c in enumerate(curves):
        step = max(1, c.size // max_points)
        idx = np.arange(0, c.size, step)
        db = np.clip(10.0 * np.log10(np.maximum(c[idx], 1e-30)), floor_db, 0.0)
        pts = " ".join(f"{_fmt(ax.x(i / sample_rate_hz))},{_fmt(ax.y(v))}" for i, v in zip(idx, db))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{COLORS[k % len(COLORS)]}" '
                   'stroke-width="1.5"/>')
    out += _legend(labels)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter(truth: Sequence[float], est: Sequence[float], title: str, label: str) -> str:
    """Estimate against truth with the identity line."""
    pairs = [(t, e) for t, e in zip(truth, est) if math.isfinite(t) and math.isfinite(e)]
    vals = [v for p in pairs for v in p] or [0.0, 1.0]
    lo, hi = min(vals), max(vals)
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    ax = _Axes((lo - pad, hi + pad), (lo - pad, hi + pad))
    out = _frame(ax, title, f"true {label}", f"estimated {label}")
    out.append(f'<line x1="{_fmt(ax.x(ax.x0))}" y1="{_fmt(ax.y(ax.y0))}" x2="{_fmt(ax.x(ax.x1))}" '
               f'y2="{_fmt(ax.y(ax.y1))}" stroke="gray" stroke-dasharray="4 3"/>')
    for t, e in pairs:
        out.append(f'<circle cx="{_fmt(ax.x(t))}" cy="{_fmt(ax.y(e))}" r="3" fill="{COLORS[0]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bars(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str) -> str:
    """One bar per condition; missing values are drawn as empty slots."""
    finite = [v for v in values if v is not None and math.isfinite(v)]
    top = max(finite + [1e-3]) * 1.15
    n = max(len(labels), 1)
    ax = _Axes((0.0, float(n)), (0.0, top))
    out = _frame(ax, title, "condition", ylabel, xticks=False)
    for k, (label, v) in enumerate(zip(labels, values)):
        x0, x1 = ax.x(k + 0.2), ax.x(k + 0.8)
        if v is not None and math.isfinite(v):
            out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(ax.y(v))}" width="{_fmt(x1 - x0)}" '
                       f'height="{_fmt(ax.y(0.0) - ax.y(v))}" fill="{COLORS[k % len(COLORS)]}"/>')
        out.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{_fmt(ax.py0 + 16)}" '
                   f'text-anchor="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
