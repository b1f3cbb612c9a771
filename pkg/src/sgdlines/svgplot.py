"""Tiny deterministic SVG writer: line plots and heatmaps, nothing else."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=40, bottom=50)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick_label(x: float) -> str:
    if x == 0:
        return "0"
    if abs(x) >= 1e4 or abs(x) < 1e-3:
        return f"{x:.1e}"
    return f"{x:.4g}"


def nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / max(count, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * step:
        ticks.append(round(t / step) * step)
        t += step
    return ticks


def _header(title: str) -> list:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
    ]


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "",
              hlines=()) -> str:
    """``series`` is a list of ``(label, xs, ys)``; non-finite points break the line."""
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    xs_all = np.concatenate([np.asarray(x, float) for _, x, _ in series]) if series else np.zeros(0)
    ys_all = np.concatenate([np.asarray(y, float) for _, _, y in series]) if series else np.zeros(0)
    ys_all = np.concatenate([ys_all, np.asarray([h for h, _ in hlines], float)])
    fx = xs_all[np.isfinite(xs_all)]
    fy = ys_all[np.isfinite(ys_all)]
    xmin, xmax = (float(fx.min()), float(fx.max())) if fx.size else (0.0, 1.0)
    ymin, ymax = (float(fy.min()), float(fy.max())) if fy.size else (0.0, 1.0)
    if xmax == xmin:
        xmin, xmax = xmin - 0.5, xmax + 0.5
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad

    def px(x):
        return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0)

    def py(y):
        return y0 - (y - ymin) / (ymax - ymin) * (y0 - y1)

    out = _header(title)
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" '
               f'stroke="black"/>')
    for t in nice_ticks(xmin, xmax):
        out.append(f'<line x1="{_num(px(t))}" y1="{y0}" x2="{_num(px(t))}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{_num(px(t))}" y="{y0 + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{escape(_tick_label(t))}</text>')
    for t in nice_ticks(ymin, ymax):
        out.append(f'<line x1="{x0 - 5}" y1="{_num(py(t))}" x2="{x0}" y2="{_num(py(t))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_num(py(t) + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{escape(_tick_label(t))}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 10}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {(y0 + y1) / 2})">{escape(ylabel)}</text>')
    for h, label in hlines:
        out.append(f'<line x1="{x0}" y1="{_num(py(h))}" x2="{x1}" y2="{_num(py(h))}" '
                   f'stroke="gray" stroke-dasharray="4 3"/>')
    for n, (label, xs, ys) in enumerate(series):
        color = PALETTE[n % len(PALETTE)]
        segment = []
        for x, y in zip(np.asarray(xs, float), np.asarray(ys, float)):
            if math.isfinite(x) and math.isfinite(y):
                segment.append(f"{_num(px(x))},{_num(py(min(max(y, ymin), ymax)))}")
            elif segment:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                           f'points="{" ".join(segment)}"/>')
                segment = []
        if segment:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{" ".join(segment)}"/>')
        ly = y1 + 14 + 16 * n
        out.append(f'<line x1="{x1 + 10}" y1="{ly}" x2="{x1 + 30}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{x1 + 35}" y="{ly + 4}" font-family="sans-serif" '
                   f'font-size="11">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(v: float, lo: float, hi: float) -> str:
    if not math.isfinite(v):
        return "#cccccc"
    t = 0.0 if hi <= lo else min(max((v - lo) / (hi - lo), 0.0), 1.0)
    # white -> dark blue
    r = int(round(255 * (1 - t) + 8 * t))
    g = int(round(255 * (1 - t) + 48 * t))
    b = int(round(255 * (1 - t) + 107 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(matrix, title: str = "", labels=None, vmax: float | None = None) -> str:
    m = np.asarray(matrix, dtype=float)
    n_rows, n_cols = m.shape
    x0, y1 = MARGIN["left"], MARGIN["top"]
    size = min(WIDTH - MARGIN["left"] - MARGIN["right"], HEIGHT - MARGIN["top"] - MARGIN["bottom"])
    cw, ch = size / max(n_cols, 1), size / max(n_rows, 1)
    finite = m[np.isfinite(m)]
    lo = 0.0
    hi = float(vmax if vmax is not None else (finite.max() if finite.size else 1.0))
    out = _header(title)
    for i in range(n_rows):
        for j in range(n_cols):
            out.append(f'<rect x="{_num(x0 + j * cw)}" y="{_num(y1 + i * ch)}" width="{_num(cw)}" '
                       f'height="{_num(ch)}" fill="{_color(m[i, j], lo, hi)}"/>')
    out.append(f'<rect x="{x0}" y="{y1}" width="{_num(cw * n_cols)}" height="{_num(ch * n_rows)}" '
               f'fill="none" stroke="black"/>')
    if labels is not None and len(labels):
        for pos in sorted({0, len(labels) // 2, len(labels) - 1}):
            out.append(f'<text x="{_num(x0 + (pos + 0.5) * cw)}" y="{_num(y1 + n_rows * ch + 15)}" '
                       f'text-anchor="middle" font-family="sans-serif" font-size="10">'
                       f'{escape(str(labels[pos]))}</text>')
            out.append(f'<text x="{x0 - 5}" y="{_num(y1 + (pos + 0.5) * ch + 3)}" text-anchor="end" '
                       f'font-family="sans-serif" font-size="10">{escape(str(labels[pos]))}</text>')
    bar_x = x0 + size + 20
    for k in range(20):
        v = lo + (hi - lo) * (19 - k) / 19
        out.append(f'<rect x="{_num(bar_x)}" y="{_num(y1 + k * size / 20)}" width="15" '
                   f'height="{_num(size / 20 + 0.5)}" fill="{_color(v, lo, hi)}"/>')
    out.append(f'<text x="{_num(bar_x + 20)}" y="{y1 + 10}" font-family="sans-serif" '
               f'font-size="10">{escape(_tick_label(hi))}</text>')
    out.append(f'<text x="{_num(bar_x + 20)}" y="{_num(y1 + size)}" font-family="sans-serif" '
               f'font-size="10">{escape(_tick_label(lo))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
