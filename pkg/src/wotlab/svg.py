"""Minimal deterministic SVG scatter and line plots (no plotting library).

Coordinates are printed with a fixed number of decimals, so the same input
always yields byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

WIDTH = 420
HEIGHT = 420
MARGIN = 40


@dataclass
class Group:
    points: np.ndarray
    color: str = "#1f77b4"
    label: str = ""
    radius: float = 1.6
    opacity: float = 0.6


@dataclass
class Series:
    x: Sequence[float]
    y: Sequence[float]
    color: str = "#1f77b4"
    label: str = ""


def _bounds(arrays, bounds) -> tuple[float, float, float, float]:
    if bounds is not None:
        return tuple(float(b) for b in bounds)
    xs = [a[:, 0] for a in arrays if len(a)]
    ys = [a[:, 1] for a in arrays if len(a)]
    if not xs:
        return -1.0, 1.0, -1.0, 1.0
    x0, x1 = float(min(v.min() for v in xs)), float(max(v.max() for v in xs))
    y0, y1 = float(min(v.min() for v in ys)), float(max(v.max() for v in ys))

    def pad(lo, hi):
        if hi - lo < 1e-12:
            return lo - 1.0, hi + 1.0
        d = 0.05 * (hi - lo)
        return lo - d, hi + d

    return (*pad(x0, x1), *pad(y0, y1))


class _Canvas:
    def __init__(self, bounds, title: str):
        self.x0, self.x1, self.y0, self.y1 = bounds
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        ]
        if title:
            self.parts.append(f'<text x="{WIDTH / 2:.2f}" y="20" font-size="13" text-anchor="middle">'
                              f'{_escape(title)}</text>')
        self._axes()

    def px(self, x: float) -> float:
        return MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y: float) -> float:
        return HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)

    def _axes(self) -> None:
        left, right = MARGIN, WIDTH - MARGIN
        top, bottom = MARGIN, HEIGHT - MARGIN
        self.parts.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
                          'fill="none" stroke="black" stroke-width="1"/>')
        for frac in (0.0, 0.5, 1.0):
            xv = self.x0 + frac * (self.x1 - self.x0)
            yv = self.y0 + frac * (self.y1 - self.y0)
            self.parts.append(f'<text x="{self.px(xv):.2f}" y="{bottom + 15}" font-size="10" '
                              f'text-anchor="middle">{_tick(xv)}</text>')
            self.parts.append(f'<text x="{left - 4}" y="{self.py(yv) + 3:.2f}" font-size="10" '
                              f'text-anchor="end">{_tick(yv)}</text>')

    def legend(self, items) -> None:
        for i, (label, color) in enumerate(item for item in items if item[0]):
            y = MARGIN + 12 + 14 * i
            self.parts.append(f'<rect x="{MARGIN + 6}" y="{y - 8}" width="8" height="8" fill="{color}"/>')
            self.parts.append(f'<text x="{MARGIN + 18}" y="{y}" font-size="10">{_escape(label)}</text>')

    def save(self, path) -> None:
        self.parts.append("</svg>")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.parts) + "\n")


def _tick(v: float) -> str:
    return f"{v:.3g}"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg_scatter(groups: Sequence[Group], path, bounds: Optional[Sequence[float]] = None,
                      title: str = "") -> None:
    """Scatter plot of point groups; ``bounds`` is (xmin, xmax, ymin, ymax).

    Raises ValueError on non-finite coordinates. 1D point arrays are drawn on
    the line y = 0.
    """
    arrays = []
    for g in groups:
        pts = np.asarray(g.points, dtype=float)
        if pts.ndim == 1:
            pts = np.stack([pts, np.zeros_like(pts)], axis=1)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError(f"group {g.label!r} has non-finite coordinates")
        arrays.append(pts.reshape(-1, 2) if pts.size else np.zeros((0, 2)))
    canvas = _Canvas(_bounds(arrays, bounds), title)
    for g, pts in zip(groups, arrays):
        canvas.parts.append(f'<g fill="{g.color}" fill-opacity="{g.opacity:.2f}">')
        for x, y in pts:
            canvas.parts.append(f'<circle cx="{canvas.px(x):.2f}" cy="{canvas.py(y):.2f}" r="{g.radius:.2f}"/>')
        canvas.parts.append("</g>")
    canvas.legend((g.label, g.color) for g in groups)
    canvas.save(path)


def write_svg_lines(series: Sequence[Series], path, title: str = "", log_y: bool = False) -> None:
    """Polyline plot, e.g. metric trajectories or a gamma sweep table."""
    arrays = []
    for s in series:
        y = np.asarray(s.y, dtype=float)
        if log_y:
            y = np.log10(np.maximum(y, 1e-12))
        arr = np.stack([np.asarray(s.x, dtype=float), y], axis=1) if len(y) else np.zeros((0, 2))
        arrays.append(arr[np.all(np.isfinite(arr), axis=1)])
    canvas = _Canvas(_bounds(arrays, None), title + (" (log10 y)" if log_y and title else ""))
    for s, arr in zip(series, arrays):
        if len(arr) == 0:
            continue
        pts = " ".join(f"{canvas.px(x):.2f},{canvas.py(y):.2f}" for x, y in arr)
        canvas.parts.append(f'<polyline points="{pts}" fill="none" stroke="{s.color}" stroke-width="1.5"/>')
        if len(arr) == 1 or not math.isfinite(arr[0, 0]):
            x, y = arr[0]
            canvas.parts.append(f'<circle cx="{canvas.px(x):.2f}" cy="{canvas.py(y):.2f}" r="2.5" fill="{s.color}"/>')
    canvas.legend((s.label, s.color) for s in series)
    canvas.save(path)
