"""Minimal static SVG line plots.

Just enough for the report figures: axes box, linear ticks, a handful
of colored polylines, and a legend. Every plot is also emitted as CSV
by the reporting layer, so anything fancier can re-render from data.
"""

from pathlib import Path

import numpy as np

PALETTE = ["#1965b0", "#dc050c", "#4eb265", "#f7a800", "#882e72", "#777777"]

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 16, 34, 46


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n, 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1, 2, 2.5, 5, 10):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = np.ceil(lo / step) * step
    ticks = np.arange(first, hi + step / 2, step)
    return ticks[(ticks >= lo - 1e-12) & (ticks <= hi + 1e-12)]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def line_plot(path, series, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 720, height: int = 420, log_y: bool = False) -> Path:
    """Write a multi-series line plot.

    ``series`` is a list of (x, y, label) with 1-d arrays. Returns the
    written path.
    """
    path = Path(path)
    plot_w = width - _MARGIN_L - _MARGIN_R
    plot_h = height - _MARGIN_T - _MARGIN_B

    xs = [np.asarray(x, dtype=float) for x, _, _ in series]
    ys = [np.asarray(y, dtype=float) for _, y, _ in series]
    if log_y:
        ys = [np.log10(np.clip(y, 1e-300, None)) for y in ys]
    x_lo = min(x.min() for x in xs)
    x_hi = max(x.max() for x in xs)
    y_lo = min(y.min() for y in ys)
    y_hi = max(y.max() for y in ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    def sx(x):
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return _MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#222" stroke-width="1"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
                     f'font-size="14">{title}</text>')

    for tx in _nice_ticks(x_lo, x_hi):
        px = sx(tx)
        parts.append(f'<line x1="{px:.1f}" y1="{_MARGIN_T + plot_h}" x2="{px:.1f}" '
                     f'y2="{_MARGIN_T + plot_h + 4}" stroke="#222"/>')
        parts.append(f'<text x="{px:.1f}" y="{_MARGIN_T + plot_h + 17}" '
                     f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _nice_ticks(y_lo, y_hi):
        py = sy(ty)
        label = _fmt(10 ** ty) if log_y else _fmt(ty)
        parts.append(f'<line x1="{_MARGIN_L - 4}" y1="{py:.1f}" x2="{_MARGIN_L}" '
                     f'y2="{py:.1f}" stroke="#222"/>')
        parts.append(f'<text x="{_MARGIN_L - 7}" y="{py + 4:.1f}" '
                     f'text-anchor="end">{label}</text>')
    if xlabel:
        parts.append(f'<text x="{_MARGIN_L + plot_w / 2:.1f}" y="{height - 8}" '
                     f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        cy = _MARGIN_T + plot_h / 2
        parts.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {cy:.1f})">{ylabel}</text>')

    for i, ((x, _, label), y) in enumerate(zip(series, ys)):
        color = PALETTE[i % len(PALETTE)]
        step = max(1, len(x) // 4000)  # cap polyline size
        pts = " ".join(f"{sx(xv):.1f},{sy(yv):.1f}"
                       for xv, yv in zip(x[::step], y[::step]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.3"/>')
        if label:
            ly = _MARGIN_T + 16 + 15 * i
            lx = _MARGIN_L + plot_w - 150
            parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                         f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{lx + 27}" y="{ly}">{label}</text>')

    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path
