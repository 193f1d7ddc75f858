"""Bare-bones SVG figures (line charts, polar polygons, heat maps) with no plotting dependency."""

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
W, H, PAD = 640, 420, 60


def _doc(body, width=W, height=H):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}</svg>\n')


def _text(x, y, s, anchor="middle", size=12):
    return f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{anchor}" font-size="{size}">{escape(str(s))}</text>\n'


def _span(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(series, title="", xlabel="", ylabel="", ylim=None):
    """``series`` maps a legend label to (xs, ys)."""
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    x0, x1 = _span(xs)
    y0, y1 = ylim if ylim else _span(ys)

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    out = [f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" '
           f'fill="none" stroke="black"/>\n']
    for k in range(5):
        xv, yv = x0 + (x1 - x0) * k / 4, y0 + (y1 - y0) * k / 4
        out.append(_text(px(xv), H - PAD + 16, f"{xv:.3g}"))
        out.append(_text(PAD - 6, py(yv) + 4, f"{yv:.3g}", anchor="end"))
    for n, (label, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(sx, sy))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>\n')
        out.append(f'<rect x="{W - PAD + 8}" y="{PAD + 16 * n}" width="10" height="10" fill="{color}"/>\n')
        out.append(_text(W - PAD + 22, PAD + 9 + 16 * n, label, anchor="start", size=10))
    out.append(_text(W / 2, 30, title, size=14))
    out.append(_text(W / 2, H - 18, xlabel))
    out.append(f'<text x="16" y="{H / 2}" text-anchor="middle" transform="rotate(-90 16 {H / 2})">'
               f'{escape(ylabel)}</text>\n')
    return _doc("".join(out), W + 80)


def polar_polygons(polygons, title=""):
    """``polygons`` maps a label to a list of (rho, theta) vertices, rho in [0, 1]."""
    cx, cy, r = W / 2, H / 2 + 10, min(W, H) / 2 - PAD
    out = [f'<circle cx="{cx}" cy="{cy}" r="{r * f}" fill="none" stroke="#bbb"/>\n' for f in (0.25, 0.5, 0.75, 1.0)]
    for n, (label, verts) in enumerate(polygons.items()):
        color = PALETTE[n % len(PALETTE)]
        pts = " ".join(f"{cx + r * rho * math.cos(th):.2f},{cy - r * rho * math.sin(th):.2f}"
                       for rho, th in verts)
        out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="{color}"/>\n')
        out.append(_text(20, 40 + 16 * n, label, anchor="start"))
        out.append(f'<rect x="6" y="{31 + 16 * n}" width="10" height="10" fill="{color}"/>\n')
    out.append(_text(W / 2, 24, title, size=14))
    return _doc("".join(out))


def heatmap(matrix, row_labels, col_labels, title="", vmax=1.0):
    """Diverging blue/red cells for values in [-vmax, vmax]."""
    rows, cols = len(matrix), len(matrix[0])
    cw, ch = 16, 16
    left, top = 50, 50
    out = []
    for i in range(rows):
        out.append(_text(left - 4, top + ch * i + 12, row_labels[i], anchor="end", size=9))
        for j in range(cols):
            v = max(-1.0, min(1.0, matrix[i][j] / vmax))
            a = int(255 * (1 - abs(v)))
            color = f"rgb(255,{a},{a})" if v >= 0 else f"rgb({a},{a},255)"
            out.append(f'<rect x="{left + cw * j}" y="{top + ch * i}" width="{cw}" height="{ch}" fill="{color}"/>\n')
    for j in range(cols):
        x, y = left + cw * j + 11, top + ch * rows + 6
        out.append(f'<text x="{x}" y="{y}" font-size="8" transform="rotate(90 {x} {y})">'
                   f'{escape(str(col_labels[j]))}</text>\n')
    out.append(_text(left + cw * cols / 2, 30, title, size=14))
    return _doc("".join(out), left + cw * cols + 30, top + ch * rows + 60)
