"""Minimal deterministic SVG line charts (no plotting dependency)."""

from __future__ import annotations

from typing import List, Optional, Sequence
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

WIDTH, HEIGHT = 720, 440
MARGIN = {"left": 64, "right": 160, "top": 40, "bottom": 48}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi == lo:
        hi = lo + 1.0
    return [lo + i * (hi - lo) / (n - 1) for i in range(n)]


def line_chart(series: Sequence[dict], title: str, xlabel: str, ylabel: str,
               comment: Optional[str] = None) -> str:
    """Render series [{label, xs, ys, stderr?}] to an SVG string.

    Output is byte-deterministic for identical inputs; an optional comment
    (provenance) is embedded at the top of the file.
    """
    xs_all = [x for s in series for x in s["xs"]]
    ys_all = [y for s in series for y in s["ys"]]
    for s in series:
        for e, y in zip(s.get("stderr") or [], s["ys"]):
            ys_all.extend([y - e, y + e])
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    inner_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    inner_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * inner_w

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y_lo) / (y_hi - y_lo)) * inner_h

    parts = ['<?xml version="1.0" encoding="UTF-8"?>']
    if comment:
        parts.append(f"<!-- {escape(comment)} -->")
    parts.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
                 f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">')
    parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    parts.append(f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="15">{escape(title)}</text>')

    # axes and ticks
    ax_b, ax_l = py(y_lo), px(x_lo)
    parts.append(f'<line x1="{_fmt(ax_l)}" y1="{_fmt(py(y_hi))}" x2="{_fmt(ax_l)}" '
                 f'y2="{_fmt(ax_b)}" stroke="black"/>')
    parts.append(f'<line x1="{_fmt(ax_l)}" y1="{_fmt(ax_b)}" x2="{_fmt(px(x_hi))}" '
                 f'y2="{_fmt(ax_b)}" stroke="black"/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{_fmt(px(tx))}" y1="{_fmt(ax_b)}" x2="{_fmt(px(tx))}" '
                     f'y2="{_fmt(ax_b + 5)}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(px(tx))}" y="{_fmt(ax_b + 20)}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{_fmt(ax_l - 5)}" y1="{_fmt(py(ty))}" x2="{_fmt(ax_l)}" '
                     f'y2="{_fmt(py(ty))}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(ax_l - 8)}" y="{_fmt(py(ty) + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{_fmt(ty)}</text>')
    parts.append(f'<text x="{MARGIN["left"] + inner_w / 2:.2f}" y="{HEIGHT - 10}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="12">'
                 f'{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{MARGIN["top"] + inner_h / 2:.2f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {MARGIN["top"] + inner_h / 2:.2f})">'
                 f'{escape(ylabel)}</text>')

    for si, s in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s["xs"], s["ys"]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        stderr = s.get("stderr")
        if stderr:
            for x, y, e in zip(s["xs"], s["ys"], stderr):
                if e > 0:
                    parts.append(f'<line x1="{_fmt(px(x))}" y1="{_fmt(py(y - e))}" '
                                 f'x2="{_fmt(px(x))}" y2="{_fmt(py(y + e))}" '
                                 f'stroke="{color}" stroke-width="1"/>')
        ly = MARGIN["top"] + 16 * si
        lx = WIDTH - MARGIN["right"] + 12
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="11">{escape(str(s["label"]))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
