"""Minimal standalone SVG line charts of loss against round (log-scale y)."""

from __future__ import annotations

import math
import os
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .localgd import read_trajectory_csv

__all__ = ["LOSS_FLOOR", "render_svg", "emit_plot"]

LOSS_FLOOR = 1e-16

_W, _H = 640, 420
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 170, 20, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def _c(v: float) -> str:
    return f"{v:.2f}"


def render_svg(series: list[tuple[str, np.ndarray, np.ndarray]], title: str = "") -> str:
    """SVG text for (label, rounds, losses) series. Losses below LOSS_FLOOR are clamped."""
    if not series:
        raise ValueError("nothing to plot")
    xs = [np.asarray(x, dtype=np.float64) for _, x, _ in series]
    ys = [np.log10(np.maximum(np.asarray(y, dtype=np.float64), LOSS_FLOOR)) for _, _, y in series]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys] + [np.zeros(0)])
    xmax = max([float(x.max()) for x in xs if x.size] + [1.0])
    lo = math.floor(finite.min()) if finite.size else -1
    hi = math.ceil(finite.max()) if finite.size else 0
    if hi <= lo:
        hi = lo + 1
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def px(x):
        return _LEFT + pw * x / xmax

    def py(y):
        return _TOP + ph * (hi - y) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{_LEFT + pw / 2}" y="14" text-anchor="middle" '
                   f'font-size="12">{escape(title)}</text>')
    step = max(1, (hi - lo + 7) // 8)
    for e in range(lo, hi + 1, step):
        y = py(e)
        out.append(f'<line x1="{_LEFT - 4}" y1="{_c(y)}" x2="{_LEFT}" y2="{_c(y)}" stroke="black"/>')
        out.append(f'<text x="{_LEFT - 6}" y="{_c(y + 4)}" text-anchor="end" '
                   f'font-size="11">1e{e}</text>')
    for k in range(5):
        x = xmax * k / 4
        out.append(f'<text x="{_c(px(x))}" y="{_TOP + ph + 16}" text-anchor="middle" '
                   f'font-size="11">{x:g}</text>')
    out.append(f'<text x="{_LEFT + pw / 2}" y="{_H - 10}" text-anchor="middle" '
               f'font-size="12">round</text>')
    out.append(f'<text x="16" y="{_TOP + ph / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {_TOP + ph / 2})">loss</text>')

    for j, ((label, _, _), x, y) in enumerate(zip(series, xs, ys)):
        color = _COLORS[j % len(_COLORS)]
        ok = np.isfinite(y)
        pts = " ".join(f"{_c(px(a))},{_c(py(b))}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = _TOP + 14 + 16 * j
        out.append(f'<line x1="{_W - _RIGHT + 10}" y1="{ly - 4}" x2="{_W - _RIGHT + 30}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _RIGHT + 34}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_paths, out_path, title: str = "", labels=None) -> Path:
    """Write one SVG with a polyline per trajectory CSV; legend entries default to file stems."""
    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise ValueError("no trajectory CSVs given")
    labels = labels or [p.stem for p in csv_paths]
    series = []
    for label, path in zip(labels, csv_paths):
        cols = read_trajectory_csv(path)
        series.append((label, cols["r"], cols["loss"]))
    text = render_svg(series, title)
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, out_path)
    return out_path
