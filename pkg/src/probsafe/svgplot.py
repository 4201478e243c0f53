"""Minimal self-contained SVG line plots (no plotting toolkit).

Output is deterministic: float coordinates are formatted with a fixed
precision so identical data produce byte-identical files.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

__all__ = ["line_plot"]

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        return [lo]
    raw = np.linspace(lo, hi, n)
    return [float(t) for t in raw]


def line_plot(path, title: str, xlabel: str, ylabel: str,
              series: Sequence[tuple], size=(720, 440),
              y_range: Optional[tuple] = None) -> None:
    """Write one SVG chart.

    ``series`` is a sequence of (label, x, y[, dashed]) tuples; non-finite
    points are dropped.  ``y_range`` optionally pins the vertical extent.
    """
    W, H = size
    ml, mr, mt, mb = 64, 16, 36, 46
    pw, ph = W - ml - mr, H - mt - mb

    clean = []
    for item in series:
        label, xs, ys = item[0], np.asarray(item[1], float), np.asarray(item[2], float)
        dashed = bool(item[3]) if len(item) > 3 else False
        ok = np.isfinite(xs) & np.isfinite(ys)
        clean.append((label, xs[ok], ys[ok], dashed))

    all_x = np.concatenate([c[1] for c in clean]) if clean else np.array([0.0, 1.0])
    all_y = np.concatenate([c[2] for c in clean]) if clean else np.array([0.0, 1.0])
    if all_x.size == 0:
        all_x = np.array([0.0, 1.0])
    if all_y.size == 0:
        all_y = np.array([0.0, 1.0])
    x0, x1 = float(all_x.min()), float(all_x.max())
    if y_range is not None:
        y0, y1 = y_range
    else:
        y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 <= x0:
        x0, x1 = x0 - 1.0, x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 1.0, y0 + 1.0
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}" font-family="Helvetica,Arial,sans-serif" font-size="12">')
    out.append(f'<rect width="{W}" height="{H}" fill="white"/>')
    out.append(f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')

    for t in _ticks(x0, x1):
        X = px(t)
        out.append(f'<line x1="{_fmt(X)}" y1="{mt + ph}" x2="{_fmt(X)}" y2="{mt + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{_fmt(X)}" y="{mt + ph + 18}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        Y = py(t)
        out.append(f'<line x1="{ml - 4}" y1="{_fmt(Y)}" x2="{ml}" y2="{_fmt(Y)}" stroke="#333"/>')
        out.append(f'<text x="{ml - 8}" y="{_fmt(Y + 4)}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.0f}" y="{H - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.0f})">{ylabel}</text>')

    for k, (label, xs, ys, dashed) in enumerate(clean):
        color = _PALETTE[k % len(_PALETTE)]
        if len(xs):
            pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
            dash = ' stroke-dasharray="6,4"' if dashed else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
        ly = mt + 16 + 16 * k
        lx = ml + pw - 150
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.6"{dash}/>')
        out.append(f'<text x="{lx + 30}" y="{ly}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
