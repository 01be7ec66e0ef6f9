"""Minimal SVG line chart for progressive-ablation curves."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * max(1.0, abs(hi)):
        out.append(round(v, 10))
        v += step
    return out


def progressive_svg(
    curves: dict[str, list[tuple[int, float]]],
    title: str = "CRPS vs. features ablated",
    width: int = 640,
    height: int = 400,
) -> str:
    """Render one polyline per site on a log2 x axis at the checkpoints.

    Each curve's ``c = 0`` entry is drawn as a dashed horizontal baseline
    rather than on the log axis.
    """
    if not curves:
        raise ValueError("no curves to plot")
    left, right, top, bottom = 64, 120, 36, 48
    pw, ph = width - left - right, height - top - bottom
    xs = sorted({c for pts in curves.values() for c, _ in pts if c > 0})
    ys = [v for pts in curves.values() for _, v in pts]
    if not xs:
        raise ValueError("curves have no positive checkpoints")
    x_lo, x_hi = math.log2(xs[0]), math.log2(xs[-1])
    y_lo, y_hi = min(ys), max(ys)
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else max(abs(y_hi) * 0.05, 1e-3)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(c: float) -> float:
        if x_hi == x_lo:
            return left + pw / 2
        return left + pw * (math.log2(c) - x_lo) / (x_hi - x_lo)

    def py(v: float) -> float:
        return top + ph * (1 - (v - y_lo) / (y_hi - y_lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for c in xs:
        x = px(c)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{c}</text>')
    for v in _nice_ticks(y_lo, y_hi):
        y = py(v)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">features ablated (log scale)</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">CRPS</text>')
    for i, (site, pts) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        base = [v for c, v in pts if c == 0]
        if base:
            y = py(base[0])
            out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="{color}" '
                       f'stroke-dasharray="4 3" stroke-width="1"/>')
        coords = " ".join(f"{px(c):.2f},{py(v):.2f}" for c, v in pts if c > 0)
        out.append(f'<polyline class="curve" data-site="{escape(site)}" points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(site)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_progressive_svg(curves, path, **kw) -> Path:
    path = Path(path)
    path.write_text(progressive_svg(curves, **kw), encoding="utf-8")
    return path
