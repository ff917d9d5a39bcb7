"""Static SVG plots (polylines, scatters, filled bins) built from CSV columns.

Only the standard library is used. Every figure the CLI writes is produced
by :func:`plot_csv`, which reads the CSV back from disk, so a plot always
reflects the numbers that were saved next to it.
"""

from __future__ import annotations

import csv
import math
from xml.sax.saxutils import escape

W, H = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 30, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def read_columns(path) -> dict[str, list[float]]:
    """Read a header-row CSV into float columns (non-numeric cells become NaN)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    cols: dict[str, list[float]] = {h: [] for h in head}
    for r in body:
        for h, v in zip(head, r):
            try:
                cols[h].append(float(v))
            except ValueError:
                cols[h].append(float("nan"))
    return cols


def _finite(vals):
    return [v for v in vals if math.isfinite(v)]


def _range(vals):
    v = _finite(vals)
    if not v:
        return 0.0, 1.0
    lo, hi = min(v), max(v)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, xr, yr, title="", xlabel="", ylabel=""):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        ]
        self._axes(title, xlabel, ylabel)

    def sx(self, x):
        lo, hi = self.xr
        return PAD_L + (x - lo) / (hi - lo) * (W - PAD_L - PAD_R)

    def sy(self, y):
        lo, hi = self.yr
        return H - PAD_B - (y - lo) / (hi - lo) * (H - PAD_T - PAD_B)

    def _axes(self, title, xlabel, ylabel):
        x0, x1 = PAD_L, W - PAD_R
        y0, y1 = H - PAD_B, PAD_T
        p = self.parts
        p.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
                 'fill="none" stroke="#333"/>')
        for i in range(5):
            fx = self.xr[0] + i / 4 * (self.xr[1] - self.xr[0])
            fy = self.yr[0] + i / 4 * (self.yr[1] - self.yr[0])
            px, py = self.sx(fx), self.sy(fy)
            p.append(f'<text x="{px:.1f}" y="{y0 + 14}" text-anchor="middle">{fx:.3g}</text>')
            p.append(f'<text x="{x0 - 4}" y="{py + 4:.1f}" text-anchor="end">{fy:.3g}</text>')
        if title:
            p.append(f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
        if xlabel:
            p.append(f'<text x="{(x0 + x1) / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>')
        if ylabel:
            p.append(f'<text x="14" y="{(y0 + y1) / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 14 {(y0 + y1) / 2})">{escape(ylabel)}</text>')

    def legend(self, names):
        for i, nm in enumerate(names):
            y = PAD_T + 12 + 14 * i
            c = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{W - PAD_R - 110}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
            self.parts.append(f'<text x="{W - PAD_R - 96}" y="{y + 1}">{escape(nm)}</text>')

    def polyline(self, xs, ys, color, dash=False):
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        extra = ' stroke-dasharray="4 3"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')

    def dots(self, xs, ys, color, r=1.6):
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                self.parts.append(f'<circle cx="{self.sx(x):.2f}" cy="{self.sy(y):.2f}" r="{r}" '
                                  f'fill="{color}" fill-opacity="0.5"/>')

    def bar(self, lo, hi, height, color):
        x0, x1 = self.sx(lo), self.sx(hi)
        y0, y1 = self.sy(0.0), self.sy(height)
        self.parts.append(f'<rect x="{x0:.2f}" y="{min(y0, y1):.2f}" width="{max(x1 - x0, 0.5):.2f}" '
                          f'height="{abs(y0 - y1):.2f}" fill="{color}" fill-opacity="0.45"/>')

    def save(self, path):
        self.parts.append("</svg>")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.parts) + "\n")


def line_svg(path, x, series: dict, title="", xlabel="", ylabel="", diagonal=False):
    """One polyline per entry of ``series`` against the shared ``x``."""
    allx = list(x)
    ally = [v for ys in series.values() for v in ys]
    if diagonal:
        lo, hi = _range(allx + ally)
        xr = yr = (lo, hi)
    else:
        xr, yr = _range(allx), _range(ally)
    cv = _Canvas(xr, yr, title, xlabel, ylabel)
    if diagonal:
        cv.polyline([xr[0], xr[1]], [xr[0], xr[1]], "#888", dash=True)
    for i, ys in enumerate(series.values()):
        cv.polyline(allx, ys, PALETTE[i % len(PALETTE)])
    cv.legend(list(series))
    cv.save(path)


def scatter_svg(path, groups: dict, title="", xlabel="", ylabel=""):
    """``groups`` maps a label to an ``(xs, ys)`` pair."""
    allx = [v for xs, _ in groups.values() for v in xs]
    ally = [v for _, ys in groups.values() for v in ys]
    cv = _Canvas(_range(allx), _range(ally), title, xlabel, ylabel)
    for i, (xs, ys) in enumerate(groups.values()):
        cv.dots(xs, ys, PALETTE[i % len(PALETTE)])
    cv.legend(list(groups))
    cv.save(path)


def hist_svg(path, samples: dict, bins: int = 40, title="", xlabel=""):
    """Overlaid density histograms drawn as filled bins."""
    allv = _finite([v for s in samples.values() for v in s])
    lo, hi = _range(allv)
    width = (hi - lo) / bins
    dens = {}
    for k, s in samples.items():
        s = _finite(s)
        counts = [0] * bins
        for v in s:
            counts[min(int((v - lo) / width), bins - 1)] += 1
        dens[k] = [c / (max(len(s), 1) * width) for c in counts]
    top = max((max(d) for d in dens.values() if d), default=1.0) or 1.0
    cv = _Canvas((lo, hi), (0.0, 1.05 * top), title, xlabel, "density")
    for i, d in enumerate(dens.values()):
        for b, h in enumerate(d):
            if h > 0:
                cv.bar(lo + b * width, lo + (b + 1) * width, h, PALETTE[i % len(PALETTE)])
    cv.legend(list(samples))
    cv.save(path)


def quiver_svg(path, x, y, u, v, title="", scale: float | None = None):
    """Arrows drawn as short polylines from ``(x, y)`` along ``(u, v)``."""
    xr, yr = _range(list(x)), _range(list(y))
    cv = _Canvas(xr, yr, title, "x1", "x2")
    mags = [math.hypot(a, b) for a, b in zip(u, v) if math.isfinite(a) and math.isfinite(b)]
    m = max(mags, default=1.0) or 1.0
    spacing = (xr[1] - xr[0]) / max(math.sqrt(len(mags)), 1.0)
    s = scale if scale is not None else 0.9 * spacing / m
    for a, b, du, dv in zip(x, y, u, v):
        if all(map(math.isfinite, (a, b, du, dv))):
            cv.polyline([a, a + s * du], [b, b + s * dv], PALETTE[0])
            cv.dots([a], [b], PALETTE[0], r=1.0)
    cv.save(path)


def plot_csv(csv_path, svg_path, kind: str, x: str | None = None, ys=(), **kw) -> None:
    """Render ``svg_path`` from the columns of ``csv_path``.

    ``kind`` is ``"line"`` (``x`` against each of ``ys``), ``"qq"`` (line plot
    with a dashed identity), ``"scatter"`` (pairs ``(x, y)`` taken from ``ys``
    as ``[(label, xcol, ycol), ...]``), ``"hist"`` (columns ``ys``) or
    ``"quiver"`` (``ys = (xcol, ycol, ucol, vcol)``).
    """
    cols = read_columns(csv_path)
    if kind in ("line", "qq"):
        line_svg(svg_path, cols[x], {c: cols[c] for c in ys}, xlabel=x, diagonal=kind == "qq", **kw)
    elif kind == "scatter":
        scatter_svg(svg_path, {lab: (cols[a], cols[b]) for lab, a, b in ys}, **kw)
    elif kind == "hist":
        hist_svg(svg_path, {c: cols[c] for c in ys}, **kw)
    elif kind == "quiver":
        xc, yc, uc, vc = ys
        quiver_svg(svg_path, cols[xc], cols[yc], cols[uc], cols[vc], **kw)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
