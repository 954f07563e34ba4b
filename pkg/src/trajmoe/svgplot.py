"""Static SVG plots with no rendering dependency.

Output is deterministic for identical inputs: coordinates are formatted to
fixed precision and nothing is timestamped. Tests compare plots by parsing
polyline points, not raw bytes.
"""

from __future__ import annotations

import numpy as np

PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 34, 46


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _fmt_tick(x: float) -> str:
    return f"{x:.4g}"


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, count)


class _Svg:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=12, anchor="start", angle=None, color="#222"):
        rot = f' transform="rotate({angle} {_fmt(x)} {_fmt(y)})"' if angle else ""
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
                 f'text-anchor="{anchor}" fill="{color}"{rot}>{_esc(s)}</text>')

    def line(self, x1, y1, x2, y2, color="#555", width=1.0):
        self.add(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
                 f'y2="{_fmt(y2)}" stroke="{color}" stroke-width="{width}"/>')

    def save(self, path) -> None:
        self.parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(self.parts) + "\n")


def _frame(svg: _Svg, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel):
    """Draws axes/ticks/labels; returns (to_px_x, to_px_y) mappers."""
    w_in = svg.width - MARGIN_L - MARGIN_R
    h_in = svg.height - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * w_in

    def py(y):
        return MARGIN_T + h_in - (y - y_lo) / (y_hi - y_lo) * h_in

    svg.line(MARGIN_L, MARGIN_T, MARGIN_L, MARGIN_T + h_in)
    svg.line(MARGIN_L, MARGIN_T + h_in, MARGIN_L + w_in, MARGIN_T + h_in)
    for xt in _ticks(x_lo, x_hi):
        svg.line(px(xt), MARGIN_T + h_in, px(xt), MARGIN_T + h_in + 4)
        svg.text(px(xt), MARGIN_T + h_in + 17, _fmt_tick(xt), size=10, anchor="middle")
    for yt in _ticks(y_lo, y_hi):
        svg.line(MARGIN_L - 4, py(yt), MARGIN_L, py(yt))
        svg.text(MARGIN_L - 7, py(yt) + 3.5, _fmt_tick(yt), size=10, anchor="end")
    svg.text(svg.width / 2, 18, title, size=13, anchor="middle")
    svg.text(MARGIN_L + w_in / 2, svg.height - 10, xlabel, size=11, anchor="middle")
    svg.text(16, MARGIN_T + h_in / 2, ylabel, size=11, anchor="middle", angle=-90)
    return px, py


def line_plot(path, xs, series: dict[str, np.ndarray], title: str = "",
              xlabel: str = "t", ylabel: str = "", width: int = 640,
              height: int = 400) -> None:
    """One polyline per named series over a shared x axis."""
    xs = np.asarray(xs, dtype=np.float64)
    names = list(series)
    all_y = np.concatenate([np.asarray(series[k], dtype=np.float64) for k in names])
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else 0.5
    y_lo, y_hi = y_lo - pad, y_hi + pad
    svg = _Svg(width, height)
    px, py = _frame(svg, float(xs.min()), float(xs.max()), y_lo, y_hi,
                    title, xlabel, ylabel)
    for i, name in enumerate(names):
        ys = np.asarray(series[name], dtype=np.float64)
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        svg.add(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>')
    # legend, top-right inside the frame
    lx = width - MARGIN_R - 130
    for i, name in enumerate(names[:12]):
        ly = MARGIN_T + 12 + 14 * i
        svg.line(lx, ly - 4, lx + 18, ly - 4, color=PALETTE[i % len(PALETTE)], width=2)
        svg.text(lx + 23, ly, name, size=10)
    svg.save(path)


def _heat_color(u: float) -> str:
    """Two-stop lerp, light to dark blue; u in [0,1]."""
    a = np.array([0xF7, 0xFB, 0xFF], dtype=np.float64)
    b = np.array([0x08, 0x30, 0x6B], dtype=np.float64)
    c = np.round(a + (b - a) * min(max(u, 0.0), 1.0)).astype(int)
    return f"#{c[0]:02x}{c[1]:02x}{c[2]:02x}"


def heatmap(path, matrix, row_labels, col_labels, title: str = "",
            width: int = 720, height: int = 420) -> None:
    """Grid heatmap; NaN cells are drawn gray. Rows are stage bins, columns
    regions (or the transpose, the function does not care)."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    finite = m[np.isfinite(m)]
    v_hi = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    svg = _Svg(width, height)
    w_in = width - MARGIN_L - MARGIN_R
    h_in = height - MARGIN_T - MARGIN_B
    cw, ch = w_in / cols, h_in / rows
    for i in range(rows):
        for j in range(cols):
            v = m[i, j]
            color = "#dddddd" if not np.isfinite(v) else _heat_color(v / v_hi)
            x, y = MARGIN_L + j * cw, MARGIN_T + i * ch
            label = "n/a" if not np.isfinite(v) else f"{v:.3e}"
            svg.add(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(cw)}" '
                    f'height="{_fmt(ch)}" fill="{color}" stroke="white" '
                    f'stroke-width="0.5"><title>{_esc(label)}</title></rect>')
    for i, lab in enumerate(row_labels):
        svg.text(MARGIN_L - 6, MARGIN_T + (i + 0.5) * ch + 3.5, lab,
                 size=10, anchor="end")
    for j, lab in enumerate(col_labels):
        svg.text(MARGIN_L + (j + 0.5) * cw, MARGIN_T + h_in + 14, lab,
                 size=9, anchor="end", angle=-45)
    svg.text(width / 2, 18, title, size=13, anchor="middle")
    svg.save(path)
