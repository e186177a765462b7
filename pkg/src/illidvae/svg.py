"""Plain-text SVG scatter plots (no plotting dependency)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    span = hi - lo
    raw = span / max(n, 1)
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-9 * span, step)


def scatter_svg(points: np.ndarray, colors: Sequence[int], centers: Optional[np.ndarray] = None,
                radius: Optional[float] = None, title: str = "", size: int = 480) -> str:
    """Scatter of 2-D points coloured by integer class, with optional centres and circles."""
    points = np.asarray(points, dtype=np.float64)
    pad = 50
    extent = [points[:, 0].min(), points[:, 0].max(), points[:, 1].min(), points[:, 1].max()]
    if centers is not None and radius is not None:
        c = np.asarray(centers)
        extent = [min(extent[0], (c[:, 0] - radius).min()), max(extent[1], (c[:, 0] + radius).max()),
                  min(extent[2], (c[:, 1] - radius).min()), max(extent[3], (c[:, 1] + radius).max())]
    x0, x1, y0, y1 = extent
    span = max(x1 - x0, y1 - y0) or 1.0
    scale = (size - 2 * pad) / span

    def sx(v):
        return pad + (v - x0) * scale

    def sy(v):
        return size - pad - (v - y0) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        out.append(f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    # axes and ticks
    out.append(f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>')
    out.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>')
    for t in _ticks(x0, x0 + span):
        out.append(f'<line x1="{sx(t):.1f}" y1="{size - pad}" x2="{sx(t):.1f}" y2="{size - pad + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{size - pad + 18}" text-anchor="middle" font-size="10">{t:g}</text>')
    for t in _ticks(y0, y0 + span):
        out.append(f'<line x1="{pad - 5}" y1="{sy(t):.1f}" x2="{pad}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{pad - 8}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{t:g}</text>')
    for (px, py), c in zip(points, colors):
        out.append(f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="1.8" '
                   f'fill="{PALETTE[int(c) % len(PALETTE)]}" fill-opacity="0.6"/>')
    if centers is not None:
        for cx, cy in np.asarray(centers):
            out.append(f'<circle cx="{sx(cx):.2f}" cy="{sy(cy):.2f}" r="4" fill="black"/>')
            if radius is not None:
                out.append(f'<circle cx="{sx(cx):.2f}" cy="{sy(cy):.2f}" r="{radius * scale:.2f}" '
                           f'fill="none" stroke="black" stroke-dasharray="6,4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
