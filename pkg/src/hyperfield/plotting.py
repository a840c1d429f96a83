"""Minimal raster plotter: axes, polylines, tick labels, dashed markers.

Just enough to emit readable PR-curve and sweep plots as PNG without a
plotting dependency. Text uses a built-in 3x5 pixel font (digits, upper
case, and a few symbols), scaled 2x.
"""

from __future__ import annotations

import numpy as np

from .images import write_png

_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "001", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
    "-": ("000", "000", "111", "000", "000"),
    "+": ("000", "010", "111", "010", "000"),
    ":": ("000", "010", "000", "010", "000"),
    " ": ("000", "000", "000", "000", "000"),
    "A": ("010", "101", "111", "101", "101"),
    "B": ("110", "101", "110", "101", "110"),
    "C": ("011", "100", "100", "100", "011"),
    "D": ("110", "101", "101", "101", "110"),
    "E": ("111", "100", "110", "100", "111"),
    "F": ("111", "100", "110", "100", "100"),
    "G": ("011", "100", "101", "101", "011"),
    "H": ("101", "101", "111", "101", "101"),
    "I": ("111", "010", "010", "010", "111"),
    "J": ("001", "001", "001", "101", "010"),
    "K": ("101", "110", "100", "110", "101"),
    "L": ("100", "100", "100", "100", "111"),
    "M": ("101", "111", "101", "101", "101"),
    "N": ("110", "101", "101", "101", "101"),
    "O": ("010", "101", "101", "101", "010"),
    "P": ("110", "101", "110", "100", "100"),
    "Q": ("111", "101", "101", "111", "001"),
    "R": ("110", "101", "110", "110", "101"),
    "S": ("011", "100", "010", "001", "110"),
    "T": ("111", "010", "010", "010", "010"),
    "U": ("101", "101", "101", "101", "111"),
    "V": ("101", "101", "101", "101", "010"),
    "W": ("101", "101", "111", "111", "101"),
    "X": ("101", "101", "010", "101", "101"),
    "Y": ("101", "101", "010", "010", "010"),
    "Z": ("111", "001", "010", "100", "111"),
    "_": ("000", "000", "000", "000", "111"),
    "%": ("101", "001", "010", "100", "101"),
}

_PALETTE = [
    (40, 90, 200),
    (30, 150, 60),
    (200, 50, 50),
    (150, 90, 20),
    (120, 50, 160),
]


def _draw_text(canvas, x, y, text, color=(0, 0, 0), scale=2):
    for ch in str(text).upper():
        glyph = _GLYPHS.get(ch, _GLYPHS[" "])
        for row, bits in enumerate(glyph):
            for col, bit in enumerate(bits):
                if bit == "1":
                    ys = y + row * scale
                    xs = x + col * scale
                    canvas[ys : ys + scale, xs : xs + scale] = color
        x += 4 * scale
    return x


def _draw_segment(canvas, x0, y0, x1, y1, color, dashed=False):
    length = max(abs(x1 - x0), abs(y1 - y0), 1)
    steps = int(length) * 2 + 1
    ts = np.linspace(0.0, 1.0, steps)
    xs = np.round(x0 + ts * (x1 - x0)).astype(int)
    ys = np.round(y0 + ts * (y1 - y0)).astype(int)
    if dashed:
        keep = (np.arange(steps) // 6) % 2 == 0
        xs, ys = xs[keep], ys[keep]
    h, w = canvas.shape[:2]
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = color


def line_plot(
    x,
    series: dict,
    path,
    xlabel: str = "",
    vline: float | None = None,
    size=(520, 360),
) -> None:
    """Plot named series over a shared x axis and write a PNG.

    ``vline`` draws a dashed vertical marker (e.g. a chosen threshold).
    """
    x = np.asarray(x, dtype=np.float64)
    width, height = size
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    ml, mr, mt, mb = 58, 14, 14, 42
    x0, x1 = ml, width - mr
    y0, y1 = height - mb, mt

    all_y = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    ylo, yhi = float(all_y.min()), float(all_y.max())
    if yhi - ylo < 1e-12:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    xlo, xhi = float(x.min()), float(x.max())
    if xhi - xlo < 1e-12:
        xlo, xhi = xlo - 0.5, xhi + 0.5

    def to_px(xv, yv):
        px = x0 + (xv - xlo) / (xhi - xlo) * (x1 - x0)
        py = y0 - (yv - ylo) / (yhi - ylo) * (y0 - y1)
        return px, py

    # Axes box and ticks.
    frame = (60, 60, 60)
    _draw_segment(canvas, x0, y0, x1, y0, frame)
    _draw_segment(canvas, x0, y0, x0, y1, frame)
    _draw_segment(canvas, x0, y1, x1, y1, frame)
    _draw_segment(canvas, x1, y0, x1, y1, frame)
    for frac in np.linspace(0.0, 1.0, 5):
        xv = xlo + frac * (xhi - xlo)
        yv = ylo + frac * (yhi - ylo)
        px, _ = to_px(xv, ylo)
        _, py = to_px(xlo, yv)
        _draw_segment(canvas, px, y0, px, y0 + 4, frame)
        _draw_segment(canvas, x0 - 4, py, x0, py, frame)
        _draw_text(canvas, int(px) - 14, y0 + 8, f"{xv:.3g}", frame)
        _draw_text(canvas, 4, int(py) - 4, f"{yv:.3g}", frame)
    if xlabel:
        _draw_text(canvas, (x0 + x1) // 2 - 4 * len(xlabel), height - 14, xlabel, frame)

    if vline is not None:
        px, _ = to_px(vline, ylo)
        _draw_segment(canvas, px, y0, px, y1, (0, 0, 0), dashed=True)

    legend_y = y1 + 6
    for k, (name, values) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        values = np.asarray(values, dtype=np.float64)
        pts = [to_px(xv, yv) for xv, yv in zip(x, values)]
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            _draw_segment(canvas, ax, ay, bx, by, color)
        _draw_segment(canvas, x0 + 8, legend_y + 4, x0 + 24, legend_y + 4, color)
        _draw_text(canvas, x0 + 30, legend_y, name, color)
        legend_y += 14

    write_png(canvas, path)
