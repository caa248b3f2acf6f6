"""Plain-text SVG output for flow-speed maps and error/time curves."""

from __future__ import annotations

import math

import numpy as np

# anchor colors of a perceptually ordered ramp (dark blue to yellow)
_RAMP = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def color(t):
    """Hex color of ``t`` in ``[0, 1]`` on the ramp."""
    t = float(min(max(t, 0.0), 1.0)) if np.isfinite(t) else 0.0
    x = t * (len(_RAMP) - 1)
    i = min(int(x), len(_RAMP) - 2)
    c = _RAMP[i] + (x - i) * (_RAMP[i + 1] - _RAMP[i])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def _centroid_speed(space, u):
    """Speed at triangle centroids of a P2 velocity field."""
    # P2 shape values at the centroid: vertices -1/9, edge midpoints 4/9
    w = np.array([-1.0, -1.0, -1.0, 4.0, 4.0, 4.0]) / 9.0
    n = space.n_nodes
    ux = u[:n][space.cell_nodes] @ w
    uy = u[n:][space.cell_nodes] @ w
    return np.hypot(ux, uy)


def speed_heatmap(topology, velocities, spaces, px_per_cell=48, vmax=None, title=None):
    """SVG text of the flow speed over an array, one polygon per triangle.

    ``velocities`` are full-order per-cell coefficient vectors and ``spaces``
    maps component ids to their spaces.
    """
    M, N = topology.shape
    size = px_per_cell
    speeds = [_centroid_speed(spaces[c], u) for c, u in zip(topology.cells, velocities)]
    top = max((s.max() for s in speeds if s.size), default=0.0)
    vmax = top if vmax is None else vmax
    W, H = N * size, M * size
    bar = 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + 3 * bar}" height="{H + (bar if title else 0)}" '
        f'viewBox="0 0 {W + 3 * bar} {H + (bar if title else 0)}">'
    ]
    y0 = bar if title else 0
    if title:
        out.append(f'<text x="4" y="{bar - 6}" font-family="sans-serif" font-size="14">{title}</text>')
    out.append(f'<rect x="0" y="{y0}" width="{W}" height="{H}" fill="white"/>')
    for m, c in enumerate(topology.cells):
        space = spaces[c]
        ox, oy = topology.origin(m)
        verts = space.mesh.vertices
        tris = space.mesh.triangles
        s = speeds[m]
        for t, tri in enumerate(tris):
            xy = verts[tri]
            pts = " ".join(f"{(ox + x) * size:.2f},{y0 + (M - oy - y) * size:.2f}" for x, y in xy)
            col = color(s[t] / vmax) if vmax > 0 else color(0.0)
            out.append(f'<polygon points="{pts}" fill="{col}" stroke="{col}" stroke-width="0.3"/>')
    # color bar
    steps = 32
    for k in range(steps):
        yk = y0 + H * (1 - (k + 1) / steps)
        out.append(f'<rect x="{W + bar}" y="{yk:.2f}" width="{bar // 2}" height="{H / steps + 0.5:.2f}" '
                   f'fill="{color((k + 0.5) / steps)}"/>')
    out.append(f'<text x="{W + bar}" y="{y0 + 10}" font-family="sans-serif" font-size="9">{vmax:.3g}</text>')
    out.append(f'<text x="{W + bar}" y="{y0 + H - 2}" font-family="sans-serif" font-size="9">0</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_plot(series, title="", xlabel="", ylabel="", logy=False, width=480, height=320):
    """SVG text with one polyline per series and optional confidence whiskers.

    ``series`` maps a label to ``{'x': [...], 'y': [...], 'lo': [...], 'hi': [...]}``
    (``lo``/``hi`` optional).
    """
    ml, mr, mt, mb = 60, 110, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs, ys = [], []
    for s in series.values():
        xs.extend(s["x"])
        ys.extend(v for v in s["y"] if np.isfinite(v))
        for key in ("lo", "hi"):
            ys.extend(v for v in s.get(key, []) if np.isfinite(v))
    if logy:
        ys = [v for v in ys if v > 0]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    f = (lambda v: math.log10(v)) if logy else (lambda v: v)
    fy0, fy1 = f(y_lo), f(y_hi)
    if fy1 == fy0:
        fy0, fy1 = fy0 - 1, fy1 + 1

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        if logy and v <= 0:
            v = y_lo
        return mt + (1 - (f(v) - fy0) / (fy1 - fy0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml}" y="{mt - 10}" font-family="sans-serif" font-size="13">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" font-family="sans-serif" font-size="11" '
           f'text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" font-family="sans-serif" font-size="11" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>']
    for v in sorted(set(xs)):
        out.append(f'<text x="{X(v):.1f}" y="{mt + ph + 14}" font-family="sans-serif" font-size="9" '
                   f'text-anchor="middle">{v:g}</text>')
    for v in (y_lo, y_hi):
        out.append(f'<text x="{ml - 4}" y="{Y(v) + 3:.1f}" font-family="sans-serif" font-size="9" '
                   f'text-anchor="end">{v:.3g}</text>')
    for k, (label, s) in enumerate(series.items()):
        col = _PALETTE[k % len(_PALETTE)]
        pts = [(X(x), Y(y)) for x, y in zip(s["x"], s["y"]) if np.isfinite(y)]
        path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        for a, b in pts:
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{col}"/>')
        for x, lo, hi in zip(s["x"], s.get("lo", []), s.get("hi", [])):
            if np.isfinite(lo) and np.isfinite(hi):
                out.append(f'<line x1="{X(x):.2f}" y1="{Y(lo):.2f}" x2="{X(x):.2f}" y2="{Y(hi):.2f}" '
                           f'stroke="{col}" stroke-width="1"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{col}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}" font-family="sans-serif" font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
