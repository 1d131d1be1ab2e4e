"""Numba inner loops for the soft rasterizer.

Each kernel walks triangle-major over the banded integer bounding box of
every projected triangle and evaluates the signed point-triangle distance
inline.  Accumulation order is fixed (triangles in input order, pixels
row-major), so results are deterministic.  The math mirrors
renderer._pair_distance exactly; the unit suite cross-checks the two.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _edge_scalar(px, py, x1, y1, x2, y2):
    """Clamped point-segment terms: (t*, diff_x, diff_y, dist^2, cross)."""
    ex = x2 - x1
    ey = y2 - y1
    wx = px - x1
    wy = py - y1
    den = ex * ex + ey * ey
    if den < 1e-30:
        den = 1e-30
    t = (wx * ex + wy * ey) / den
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    dx = wx - t * ex
    dy = wy - t * ey
    return t, dx, dy, dx * dx + dy * dy, ex * wy - ey * wx


@njit(cache=True)
def _signed_distance_scalar(px, py, ax, ay, bx, by, cx, cy):
    """Signed distance plus closest-feature data for one pixel/triangle.

    Returns (d, sel, tstar, diff_x, diff_y, sign); sel is the closest edge
    (0: a-b, 1: b-c, 2: c-a) and diff the unnormalized pixel-minus-closest
    vector.
    """
    t0, dx0, dy0, d20, c0 = _edge_scalar(px, py, ax, ay, bx, by)
    t1, dx1, dy1, d21, c1 = _edge_scalar(px, py, bx, by, cx, cy)
    t2, dx2, dy2, d22, c2 = _edge_scalar(px, py, cx, cy, ax, ay)

    sel = 0
    tstar, dx, dy, d2 = t0, dx0, dy0, d20
    if d21 < d2:
        sel, tstar, dx, dy, d2 = 1, t1, dx1, dy1, d21
    if d22 < d2:
        sel, tstar, dx, dy, d2 = 2, t2, dx2, dy2, d22

    inside = (c0 > 0.0 and c1 > 0.0 and c2 > 0.0) or (c0 < 0.0 and c1 < 0.0 and c2 < 0.0)
    sign = -1.0 if inside else 1.0
    return sign * math.sqrt(d2), sel, tstar, dx, dy, sign


@njit(cache=True)
def forward_accumulate(uv, tris, band, sigma, width, height, log_surv):
    """Add every pair's log(1 - q) = -softplus(-d/sigma) into log_surv."""
    for k in range(tris.shape[0]):
        i0 = tris[k, 0]
        i1 = tris[k, 1]
        i2 = tris[k, 2]
        ax, ay = uv[i0, 0], uv[i0, 1]
        bx, by = uv[i1, 0], uv[i1, 1]
        cx, cy = uv[i2, 0], uv[i2, 1]
        xmin = min(ax, min(bx, cx))
        xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy))
        ymax = max(ay, max(by, cy))
        x0 = max(0, int(math.floor(xmin - band)) - 2)
        x1 = min(width - 1, int(math.ceil(xmax + band)) + 2)
        y0 = max(0, int(math.floor(ymin - band)) - 2)
        y1 = min(height - 1, int(math.ceil(ymax + band)) + 2)
        for yy in range(y0, y1 + 1):
            py = float(yy)
            row = yy * width
            for xx in range(x0, x1 + 1):
                d, _, _, _, _, _ = _signed_distance_scalar(
                    float(xx), py, ax, ay, bx, by, cx, cy
                )
                if d <= band:
                    x = -d / sigma
                    # -softplus(x) with x = -d/sigma
                    sp = math.log1p(math.exp(-abs(x)))
                    if x > 0.0:
                        sp += x
                    log_surv[row + xx] -= sp


@njit(cache=True)
def backward_accumulate(uv, tris, band, sigma, width, height, pix_factor, grad_uv):
    """Scatter dL/d(projected vertex) into grad_uv (vertex count x 2).

    pix_factor holds dL/dS * survival / (-gamma * sigma) per pixel; the
    per-pair chain multiplies in q and the envelope-theorem distance gradient
    dd/dV1 = -s (1 - t*) nhat, dd/dV2 = -s t* nhat.
    """
    for k in range(tris.shape[0]):
        i0 = tris[k, 0]
        i1 = tris[k, 1]
        i2 = tris[k, 2]
        ax, ay = uv[i0, 0], uv[i0, 1]
        bx, by = uv[i1, 0], uv[i1, 1]
        cx, cy = uv[i2, 0], uv[i2, 1]
        xmin = min(ax, min(bx, cx))
        xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy))
        ymax = max(ay, max(by, cy))
        x0 = max(0, int(math.floor(xmin - band)) - 2)
        x1 = min(width - 1, int(math.ceil(xmax + band)) + 2)
        y0 = max(0, int(math.floor(ymin - band)) - 2)
        y1 = min(height - 1, int(math.ceil(ymax + band)) + 2)
        for yy in range(y0, y1 + 1):
            py = float(yy)
            row = yy * width
            for xx in range(x0, x1 + 1):
                d, sel, tstar, dx, dy, sign = _signed_distance_scalar(
                    float(xx), py, ax, ay, bx, by, cx, cy
                )
                if d > band:
                    continue
                factor = pix_factor[row + xx]
                if factor == 0.0:
                    continue
                x = -d / sigma
                if x >= 0.0:
                    q = 1.0 / (1.0 + math.exp(-x))
                else:
                    ex = math.exp(x)
                    q = ex / (1.0 + ex)
                dist = abs(d)
                if dist <= 1e-12:
                    continue
                g = factor * q / dist
                wa = g * (-sign) * (1.0 - tstar)
                wb = g * (-sign) * tstar
                if sel == 0:
                    v1, v2 = i0, i1
                elif sel == 1:
                    v1, v2 = i1, i2
                else:
                    v1, v2 = i2, i0
                grad_uv[v1, 0] += wa * dx
                grad_uv[v1, 1] += wa * dy
                grad_uv[v2, 0] += wb * dx
                grad_uv[v2, 1] += wb * dy
