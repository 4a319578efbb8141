"""Tiny static SVG renderer for report figures (bars and polylines)."""

from __future__ import annotations

from xml.sax.saxutils import escape

W, H, PAD = 640, 400, 56
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _frame(xlabel, ylabel, body, x0, x1, y0, y1):
    ticks = []
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        px = PAD + (W - 2 * PAD) * i / 4
        py = H - PAD - (H - 2 * PAD) * i / 4
        ticks.append(f'<text x="{px:.1f}" y="{H - PAD + 16}" font-size="11" text-anchor="middle">{fx:.3g}</text>')
        ticks.append(f'<text x="{PAD - 6}" y="{py + 4:.1f}" font-size="11" text-anchor="end">{fy:.3g}</text>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
        f'<rect width="{W}" height="{H}" fill="white"/>\n'
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>\n'
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>\n'
        + "\n".join(ticks)
        + f'\n<text x="{W / 2}" y="{H - 12}" font-size="13" text-anchor="middle">{escape(xlabel)}</text>\n'
        f'<text x="16" y="{H / 2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>\n'
        + body
        + "\n</svg>\n"
    )


def bar_svg(lo, hi, counts, xlabel, ylabel):
    x0, x1 = min(lo), max(hi)
    ymax = max(max(counts), 1)
    sx = _scale(x0, x1, PAD, W - PAD)
    sy = _scale(0, ymax, H - PAD, PAD)
    bars = [
        f'<rect x="{sx(a):.2f}" y="{sy(c):.2f}" width="{max(sx(b) - sx(a) - 1, 0.5):.2f}" height="{sy(0) - sy(c):.2f}" fill="{COLORS[0]}"/>'
        for a, b, c in zip(lo, hi, counts)
    ]
    return _frame(xlabel, ylabel, "\n".join(bars), x0, x1, 0, ymax)


def line_svg(x, series, xlabel, ylabel):
    x = list(x)
    ys = [v for s in series.values() for v in s]
    x0, x1 = min(x), max(x)
    y0, y1 = min(ys + [0.0]), max(ys + [1e-12])
    sx = _scale(x0, x1, PAD, W - PAD)
    sy = _scale(y0, y1, H - PAD, PAD)
    body = []
    for i, (name, vals) in enumerate(series.items()):
        col = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, vals))
        body.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * i}" font-size="11" fill="{col}">{escape(name)}</text>')
    return _frame(xlabel, ylabel, "\n".join(body), x0, x1, y0, y1)
