"""Minimal SVG line and bar charts (text output, no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _range(values):
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title, xlabel, ylabel, ylo, yhi):
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{LEFT + pw / 2}" y="{H - 10}" text-anchor="middle" font-size="12" font-family="sans-serif">{escape(xlabel)}</text>',
        f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        v = ylo + (yhi - ylo) * k / 4
        y = TOP + ph - ph * k / 4
        out.append(f'<line x1="{LEFT - 4}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="#444"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10" font-family="sans-serif">{_fmt(v)}</text>')
    return out, pw, ph


def line_chart(series: dict, title: str, xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a legend label to ``(xs, ys)``; one polyline per entry."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    xlo, xhi = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    if xlo == xhi:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    ylo, yhi = _range(ys_all)
    out, pw, ph = _frame(title, xlabel, ylabel, ylo, yhi)

    def px(x):
        return LEFT + pw * (x - xlo) / (xhi - xlo)

    def py(y):
        return TOP + ph - ph * (y - ylo) / (yhi - ylo)

    for k in range(5):
        v = xlo + (xhi - xlo) * k / 4
        out.append(f'<text x="{px(v):.1f}" y="{TOP + ph + 15}" text-anchor="middle" font-size="10" font-family="sans-serif">{_fmt(v)}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline class="series" data-label="{escape(label)}" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = TOP + 10 + 18 * i
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 35}" y="{ly + 4}" font-size="11" font-family="sans-serif">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def bar_chart(labels, values, title: str, ylabel: str = "") -> str:
    """One bar per label; missing or non-finite values are drawn as a hatched stub marked n/a."""
    vals = [v if v is not None and math.isfinite(v) else None for v in values]
    ylo, yhi = _range([0.0] + [v for v in vals if v is not None])
    out, pw, ph = _frame(title, "", ylabel, ylo, yhi)
    n = max(len(labels), 1)
    slot = pw / n

    def py(y):
        return TOP + ph - ph * (y - ylo) / (yhi - ylo)

    for i, (label, v) in enumerate(zip(labels, vals)):
        x = LEFT + slot * i + slot * 0.15
        w = slot * 0.7
        cx = x + w / 2
        if v is None:
            out.append(f'<text x="{cx:.1f}" y="{py(0) - 4:.1f}" text-anchor="middle" font-size="11" font-family="sans-serif">n/a</text>')
        else:
            top, bottom = sorted((py(v), py(0.0)))
            out.append(
                f'<rect class="bar" data-label="{escape(str(label))}" x="{x:.1f}" y="{top:.1f}" width="{w:.1f}" '
                f'height="{bottom - top:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>'
            )
            out.append(f'<text x="{cx:.1f}" y="{top - 4:.1f}" text-anchor="middle" font-size="10" font-family="sans-serif">{_fmt(v)}</text>')
        out.append(f'<text x="{cx:.1f}" y="{TOP + ph + 15}" text-anchor="middle" font-size="11" font-family="sans-serif">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out)
