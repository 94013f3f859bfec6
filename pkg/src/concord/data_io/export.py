"""Figure and table exports: Kaplan-Meier CSV and SVG step plots, attention
scatter SVG, and simple CSV tables. The SVG is written by hand."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..attention import HeatmapWeights
from ..survival_stats import KmCurve

_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")
_W, _H = 480, 320
_M = {"left": 52, "right": 110, "top": 20, "bottom": 40}


def _f(x: float) -> str:
    return f"{x:.2f}"


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def km_rows(curves: Sequence[KmCurve], labels: Sequence[str]) -> list[tuple]:
    """``(time, survival, group)`` rows; each curve starts at (0, 1)."""
    rows = []
    for curve, label in zip(curves, labels):
        rows.append((0.0, 1.0, label))
        rows.extend((float(t), float(s), label) for t, s in zip(curve.time, curve.survival))
    return rows


def write_km_csv(path, curves: Sequence[KmCurve], labels: Sequence[str]) -> Path:
    return write_table(path, ("time", "survival", "group"), km_rows(curves, labels))


def km_svg(curves: Sequence[KmCurve], labels: Sequence[str], title: str = "") -> str:
    """Step plot of survival curves, one color per group."""
    t_max = max([float(c.time[-1]) for c in curves if len(c.time)] + [1.0])
    pw = _W - _M["left"] - _M["right"]
    ph = _H - _M["top"] - _M["bottom"]

    def px(t):
        return _M["left"] + pw * t / t_max

    def py(s):
        return _M["top"] + ph * (1.0 - s)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_M["left"]}" y="14">{escape(title)}</text>')
    x0, x1, y0, y1 = px(0), px(t_max), py(0), py(1)
    out.append(f'<path d="M{_f(x0)},{_f(y1)} V{_f(y0)} H{_f(x1)}" fill="none" stroke="black"/>')
    for s in (0.0, 0.5, 1.0):
        out.append(f'<text x="{_f(x0 - 6)}" y="{_f(py(s) + 4)}" text-anchor="end">{s:.1f}</text>')
    for t in np.linspace(0, t_max, 5):
        out.append(f'<text x="{_f(px(t))}" y="{_f(y0 + 16)}" text-anchor="middle">{t:.1f}</text>')
    out.append(f'<text x="{_f((x0 + x1) / 2)}" y="{_H - 6}" text-anchor="middle">time</text>')
    for i, (curve, label) in enumerate(zip(curves, labels)):
        color = _COLORS[i % len(_COLORS)]
        d = [f"M{_f(px(0))},{_f(py(1))}"]
        s_prev = 1.0
        for t, s in zip(curve.time, curve.survival):
            d.append(f"H{_f(px(t))}")
            if s != s_prev:
                d.append(f"V{_f(py(s))}")
            s_prev = s
        out.append(f'<path d="{" ".join(d)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _M["top"] + 14 * (i + 1)
        out.append(f'<line x1="{_W - _M["right"] + 10}" y1="{ly - 4}" x2="{_W - _M["right"] + 26}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _M["right"] + 30}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_km_svg(path, curves, labels, title: str = "") -> Path:
    path = Path(path)
    path.write_text(km_svg(curves, labels, title), encoding="utf-8")
    return path


def attention_svg(heatmap: HeatmapWeights, tile: int = 24) -> str:
    """Patches drawn at their grid coordinates, opacity scaled by weight."""
    if heatmap.coords is None:
        raise ValueError("attention scatter needs patch coordinates")
    coords = np.asarray(heatmap.coords, dtype=float)
    step = np.min(np.diff(np.unique(coords))) if np.unique(coords).size > 1 else 1.0
    grid = (coords - coords.min(axis=0)) / step
    w, h = int(grid[:, 0].max() + 1) * tile, int(grid[:, 1].max() + 1) * tile
    top = float(np.max(heatmap.weights)) or 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#f4f4f4"/>',
    ]
    for pid, (gx, gy), wt in zip(heatmap.patch_ids, grid, heatmap.weights):
        out.append(
            f'<rect x="{int(gx) * tile}" y="{int(gy) * tile}" width="{tile}" height="{tile}" '
            f'fill="#c0392b" fill-opacity="{wt / top:.4f}"><title>{escape(str(pid))}: {wt:.6f}</title></rect>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
