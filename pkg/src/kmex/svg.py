"""Dependency-free SVG output: radar summaries and prototype galleries."""

from __future__ import annotations

import math
from html import escape
from typing import Mapping, Sequence

import numpy as np

PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f")


def _doc(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
            f'viewBox="0 0 {width:g} {height:g}" font-family="sans-serif">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def radar(series: Mapping[str, Mapping[str, float]], axes: Sequence[str], size: int = 420) -> str:
    """One closed polygon per named series; every axis runs from 0 (centre) to 1 (rim)."""
    cx = cy = size / 2
    radius = size * 0.32
    n = len(axes)

    def point(i, v):
        a = -math.pi / 2 + 2 * math.pi * i / n
        r = radius * min(max(v, 0.0), 1.0)
        return cx + r * math.cos(a), cy + r * math.sin(a)

    body = [f'<rect width="{size}" height="{size + 20 * len(series)}" fill="white"/>']
    for level in (0.25, 0.5, 0.75, 1.0):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (point(i, level) for i in range(n)))
        body.append(f'<polygon points="{pts}" fill="none" stroke="#ccc" stroke-width="1"/>')
    for i, name in enumerate(axes):
        x, y = point(i, 1.0)
        lx, ly = point(i, 1.18)
        body.append(f'<line x1="{cx:.2f}" y1="{cy:.2f}" x2="{x:.2f}" y2="{y:.2f}" stroke="#ccc"/>')
        body.append(f'<text x="{lx:.2f}" y="{ly:.2f}" font-size="13" text-anchor="middle" '
                    f'dominant-baseline="middle">{escape(name)}</text>')
    for j, (label, scores) in enumerate(series.items()):
        colour = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (point(i, scores[a]) for i, a in enumerate(axes)))
        body.append(f'<polygon points="{pts}" fill="{colour}" fill-opacity="0.15" '
                    f'stroke="{colour}" stroke-width="2"/>')
        y = size + 14 + 20 * j
        body.append(f'<rect x="12" y="{y - 10}" width="12" height="12" fill="{colour}"/>')
        body.append(f'<text x="30" y="{y}" font-size="13">{escape(label)}</text>')
    return _doc(size, size + 20 * len(series), body)


def _grey(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def gallery(images: Sequence[np.ndarray], captions: Sequence[str], columns: int = 5,
            scale: int = 4) -> str:
    """Grid of small greyscale images drawn as pixel rectangles, each with a caption."""
    if len(images) != len(captions):
        raise ValueError("one caption per image")
    if not len(images):
        return _doc(10, 10, [])
    h, w = _grey(images[0]).shape
    cell_w, cell_h = w * scale + 16, h * scale + 30
    cols = max(1, min(columns, len(images)))
    rows = math.ceil(len(images) / cols)
    body = [f'<rect width="{cols * cell_w}" height="{rows * cell_h}" fill="white"/>']
    for n, (img, cap) in enumerate(zip(images, captions)):
        ox, oy = (n % cols) * cell_w + 8, (n // cols) * cell_h + 6
        g = np.clip(_grey(img), 0.0, 1.0)
        body.append(f'<g transform="translate({ox},{oy})" shape-rendering="crispEdges">')
        for i in range(h):
            for j in range(w):
                v = int(round(255 * g[i, j]))
                body.append(f'<rect x="{j * scale}" y="{i * scale}" width="{scale}" '
                            f'height="{scale}" fill="rgb({v},{v},{v})"/>')
        body.append("</g>")
        body.append(f'<text x="{ox + w * scale / 2:.1f}" y="{oy + h * scale + 16}" font-size="11" '
                    f'text-anchor="middle">{escape(cap)}</text>')
    return _doc(cols * cell_w, rows * cell_h, body)
