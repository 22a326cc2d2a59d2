"""Minimal deterministic SVG emission for curves and radar charts.

Hand-rolled on purpose: output bytes depend only on the data, which keeps
re-runs byte-identical for the reproducibility contract.
"""

from __future__ import annotations

import math
from pathlib import Path

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H, _M = 480, 480, 56  # canvas and margin


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _polyline(xs, ys, color: str) -> str:
    pts = " ".join(
        f"{_fmt(_M + x * (_W - 2 * _M))},{_fmt(_H - _M - y * (_H - 2 * _M))}"
        for x, y in zip(xs, ys)
    )
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_M}" y="{_M}" width="{_W - 2 * _M}" height="{_H - 2 * _M}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{_W // 2}" y="24" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{_W // 2}" y="{_H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{_H // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_H // 2})">{ylabel}</text>',
    ]


def write_curves(
    path: str | Path,
    curves: dict[str, tuple],
    title: str,
    xlabel: str,
    ylabel: str,
    diagonal: bool = False,
) -> None:
    """Write named (x array, y array) curves on a unit-square plot."""
    parts = _frame(title, xlabel, ylabel)
    if diagonal:
        parts.append(
            f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - _M}" y2="{_M}" '
            'stroke="#aaa" stroke-dasharray="4 4"/>'
        )
    for i, (name, (xs, ys)) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        parts.append(_polyline(xs, ys, color))
        parts.append(
            f'<text x="{_W - _M - 4}" y="{_M + 16 + 16 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_radar(
    path: str | Path,
    axes: list[str],
    series: dict[str, list[float]],
    title: str,
) -> None:
    """Radar chart of per-axis values in [0, 1], one polygon per series."""
    cx, cy, r = _W / 2, _H / 2 + 10, (_H - 2 * _M) / 2
    n = len(axes)
    parts = _frame(title, "", "")[:4]  # skip axis labels
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = []
        for k in range(n):
            ang = -math.pi / 2 + 2 * math.pi * k / n
            pts.append(f"{_fmt(cx + ring * r * math.cos(ang))},{_fmt(cy + ring * r * math.sin(ang))}")
        parts.append(
            f'<polygon fill="none" stroke="#ddd" stroke-width="1" points="{" ".join(pts)}"/>'
        )
    for k, axis in enumerate(axes):
        ang = -math.pi / 2 + 2 * math.pi * k / n
        x, y = cx + r * math.cos(ang), cy + r * math.sin(ang)
        parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(cy)}" x2="{_fmt(x)}" y2="{_fmt(y)}" stroke="#ccc"/>')
        parts.append(
            f'<text x="{_fmt(cx + 1.12 * r * math.cos(ang))}" y="{_fmt(cy + 1.12 * r * math.sin(ang))}" '
            f'text-anchor="middle" font-size="11">{axis}</text>'
        )
    for i, (name, values) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = []
        for k in range(n):
            ang = -math.pi / 2 + 2 * math.pi * k / n
            v = max(0.0, min(1.0, values[k]))
            pts.append(f"{_fmt(cx + v * r * math.cos(ang))},{_fmt(cy + v * r * math.sin(ang))}")
        parts.append(
            f'<polygon fill="{color}" fill-opacity="0.12" stroke="{color}" '
            f'stroke-width="1.5" points="{" ".join(pts)}"/>'
        )
        parts.append(
            f'<text x="{_W - _M - 4}" y="{_M + 16 + 16 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
