"""Rasterization kernels (numba loop + numpy vectorized twins).

Pixel ``(row, col)`` has its center at ``(u, v) = (col + 0.5, row + 0.5)`` in
pixel coordinates. Every public function dispatches on
:func:`portrait_anim._accel.numba_enabled`; the ``*_nb`` / ``*_np`` variants are
exported so the benchmark and the equivalence tests can call both.
"""
import math

import numpy as np

from ._accel import njit, numba_enabled

ELLIPSE, CAPSULE, POLYGON = 0, 1, 2

# soft-edge ramp: coverage = clip(0.5 - signed_distance, 0, 1), one pixel wide
_BBOX_PAD = 2.0


# --------------------------------------------------------------------------
# hard capsules (hand control image)
# --------------------------------------------------------------------------

@njit
def _raster_capsules_nb(p0, p1, radii, colors, height, width):
    rgb = np.zeros((height, width, 3))
    mask = np.zeros((height, width), dtype=np.uint8)
    for s in range(p0.shape[0]):
        ax, ay = p0[s, 0], p0[s, 1]
        bx, by = p1[s, 0], p1[s, 1]
        r = radii[s]
        c0 = int(math.floor(min(ax, bx) - r - _BBOX_PAD))
        c1 = int(math.ceil(max(ax, bx) + r + _BBOX_PAD))
        r0 = int(math.floor(min(ay, by) - r - _BBOX_PAD))
        r1 = int(math.ceil(max(ay, by) + r + _BBOX_PAD))
        c0 = max(c0, 0)
        r0 = max(r0, 0)
        c1 = min(c1, width)
        r1 = min(r1, height)
        dx = bx - ax
        dy = by - ay
        ll = dx * dx + dy * dy
        for i in range(r0, r1):
            v = i + 0.5
            for j in range(c0, c1):
                u = j + 0.5
                if ll > 0.0:
                    h = ((u - ax) * dx + (v - ay) * dy) / ll
                    h = min(max(h, 0.0), 1.0)
                else:
                    h = 0.0
                qx = u - ax - h * dx
                qy = v - ay - h * dy
                if qx * qx + qy * qy <= r * r:
                    mask[i, j] = 1
                    rgb[i, j, 0] = colors[s, 0]
                    rgb[i, j, 1] = colors[s, 1]
                    rgb[i, j, 2] = colors[s, 2]
    return rgb, mask


def _raster_capsules_np(p0, p1, radii, colors, height, width):
    rgb = np.zeros((height, width, 3))
    mask = np.zeros((height, width), dtype=np.uint8)
    for s in range(p0.shape[0]):
        (ax, ay), (bx, by), r = p0[s], p1[s], radii[s]
        c0 = max(int(math.floor(min(ax, bx) - r - _BBOX_PAD)), 0)
        c1 = min(int(math.ceil(max(ax, bx) + r + _BBOX_PAD)), width)
        r0 = max(int(math.floor(min(ay, by) - r - _BBOX_PAD)), 0)
        r1 = min(int(math.ceil(max(ay, by) + r + _BBOX_PAD)), height)
        if c1 <= c0 or r1 <= r0:
            continue
        u = np.arange(c0, c1) + 0.5
        v = (np.arange(r0, r1) + 0.5)[:, None]
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        if ll > 0.0:
            h = np.clip(((u - ax) * dx + (v - ay) * dy) / ll, 0.0, 1.0)
        else:
            h = np.zeros((r1 - r0, c1 - c0))
        qx = u - ax - h * dx
        qy = v - ay - h * dy
        inside = qx * qx + qy * qy <= r * r
        mask[r0:r1, c0:c1][inside] = 1
        rgb[r0:r1, c0:c1][inside] = colors[s]
    return rgb, mask


def raster_capsules(p0, p1, radii, colors, height, width):
    """Painter's-order hard rasterization of 2-D capsules.

    Segments are drawn in array order (later ones overwrite). Returns
    ``(rgb, mask)`` with ``rgb`` float64 ``(H, W, 3)`` and ``mask`` uint8.
    """
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    p1 = np.ascontiguousarray(p1, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    fn = _raster_capsules_nb if numba_enabled() else _raster_capsules_np
    return fn(p0, p1, radii, colors, int(height), int(width))


# --------------------------------------------------------------------------
# soft shapes (avatar frames)
# --------------------------------------------------------------------------

@njit
def _shape_bbox(kind, prm, poly, lo, hi):
    if kind == ELLIPSE:
        ext = max(prm[2], prm[3])
        return prm[0] - ext, prm[0] + ext, prm[1] - ext, prm[1] + ext
    if kind == CAPSULE:
        r = prm[4]
        return (min(prm[0], prm[2]) - r, max(prm[0], prm[2]) + r,
                min(prm[1], prm[3]) - r, max(prm[1], prm[3]) + r)
    xmin = poly[lo, 0]
    xmax = poly[lo, 0]
    ymin = poly[lo, 1]
    ymax = poly[lo, 1]
    for k in range(lo + 1, hi):
        xmin = min(xmin, poly[k, 0])
        xmax = max(xmax, poly[k, 0])
        ymin = min(ymin, poly[k, 1])
        ymax = max(ymax, poly[k, 1])
    return xmin, xmax, ymin, ymax


@njit
def _signed_distance(kind, prm, poly, lo, hi, u, v):
    if kind == ELLIPSE:
        dx = u - prm[0]
        dy = v - prm[1]
        c = math.cos(prm[4])
        s = math.sin(prm[4])
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        rx = prm[2]
        ry = prm[3]
        g = math.sqrt((lx / rx) ** 2 + (ly / ry) ** 2)
        if g < 1e-12:
            return -min(rx, ry)
        grad = math.sqrt((lx / (rx * rx)) ** 2 + (ly / (ry * ry)) ** 2) / g
        return (g - 1.0) / grad
    if kind == CAPSULE:
        ax = prm[0]
        ay = prm[1]
        dx = prm[2] - ax
        dy = prm[3] - ay
        ll = dx * dx + dy * dy
        h = 0.0
        if ll > 0.0:
            h = min(max(((u - ax) * dx + (v - ay) * dy) / ll, 0.0), 1.0)
        qx = u - ax - h * dx
        qy = v - ay - h * dy
        return math.sqrt(qx * qx + qy * qy) - prm[4]
    best = 1e30
    inside = False
    n = hi - lo
    for k in range(n):
        ax = poly[lo + k, 0]
        ay = poly[lo + k, 1]
        bx = poly[lo + (k + 1) % n, 0]
        by = poly[lo + (k + 1) % n, 1]
        dx = bx - ax
        dy = by - ay
        ll = dx * dx + dy * dy
        h = 0.0
        if ll > 0.0:
            h = min(max(((u - ax) * dx + (v - ay) * dy) / ll, 0.0), 1.0)
        qx = u - ax - h * dx
        qy = v - ay - h * dy
        best = min(best, qx * qx + qy * qy)
        if (ay > v) != (by > v):
            xc = ax + (v - ay) * dx / dy
            if u < xc:
                inside = not inside
    d = math.sqrt(best)
    return -d if inside else d


@njit
def _raster_soft_nb(kinds, params, poly, poly_off, colors, alphas, canvas):
    height, width = canvas.shape[0], canvas.shape[1]
    for s in range(kinds.shape[0]):
        kind = kinds[s]
        lo = poly_off[s]
        hi = poly_off[s + 1]
        xmin, xmax, ymin, ymax = _shape_bbox(kind, params[s], poly, lo, hi)
        c0 = max(int(math.floor(xmin - _BBOX_PAD)), 0)
        c1 = min(int(math.ceil(xmax + _BBOX_PAD)), width)
        r0 = max(int(math.floor(ymin - _BBOX_PAD)), 0)
        r1 = min(int(math.ceil(ymax + _BBOX_PAD)), height)
        for i in range(r0, r1):
            for j in range(c0, c1):
                sd = _signed_distance(kind, params[s], poly, lo, hi, j + 0.5, i + 0.5)
                cov = min(max(0.5 - sd, 0.0), 1.0) * alphas[s]
                if cov > 0.0:
                    for ch in range(3):
                        canvas[i, j, ch] = canvas[i, j, ch] * (1.0 - cov) + colors[s, ch] * cov
    return canvas


def _signed_distance_np(kind, prm, poly, u, v):
    if kind == ELLIPSE:
        dx, dy = u - prm[0], v - prm[1]
        c, s = math.cos(prm[4]), math.sin(prm[4])
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        rx, ry = prm[2], prm[3]
        g = np.sqrt((lx / rx) ** 2 + (ly / ry) ** 2)
        safe = np.where(g < 1e-12, 1.0, g)
        grad = np.sqrt((lx / (rx * rx)) ** 2 + (ly / (ry * ry)) ** 2) / safe
        grad = np.where(g < 1e-12, 1.0, grad)
        return np.where(g < 1e-12, -min(rx, ry), (g - 1.0) / grad)
    if kind == CAPSULE:
        ax, ay = prm[0], prm[1]
        dx, dy = prm[2] - ax, prm[3] - ay
        ll = dx * dx + dy * dy
        if ll > 0.0:
            h = np.clip(((u - ax) * dx + (v - ay) * dy) / ll, 0.0, 1.0)
        else:
            h = 0.0
        qx = u - ax - h * dx
        qy = v - ay - h * dy
        return np.sqrt(qx * qx + qy * qy) - prm[4]
    best = np.full(np.broadcast(u, v).shape, 1e30)
    inside = np.zeros_like(best, dtype=bool)
    n = poly.shape[0]
    for k in range(n):
        ax, ay = poly[k]
        bx, by = poly[(k + 1) % n]
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        if ll > 0.0:
            h = np.clip(((u - ax) * dx + (v - ay) * dy) / ll, 0.0, 1.0)
        else:
            h = 0.0
        qx = u - ax - h * dx
        qy = v - ay - h * dy
        best = np.minimum(best, qx * qx + qy * qy)
        if ay != by:
            crosses = (ay > v) != (by > v)
            xc = ax + (v - ay) * dx / dy
            inside ^= crosses & (u < xc)
    d = np.sqrt(best)
    return np.where(inside, -d, d)


def _raster_soft_np(kinds, params, poly, poly_off, colors, alphas, canvas):
    height, width = canvas.shape[:2]
    for s in range(kinds.shape[0]):
        kind = int(kinds[s])
        lo, hi = poly_off[s], poly_off[s + 1]
        xmin, xmax, ymin, ymax = _shape_bbox_py(kind, params[s], poly[lo:hi])
        c0 = max(int(math.floor(xmin - _BBOX_PAD)), 0)
        c1 = min(int(math.ceil(xmax + _BBOX_PAD)), width)
        r0 = max(int(math.floor(ymin - _BBOX_PAD)), 0)
        r1 = min(int(math.ceil(ymax + _BBOX_PAD)), height)
        if c1 <= c0 or r1 <= r0:
            continue
        u = np.arange(c0, c1) + 0.5
        v = (np.arange(r0, r1) + 0.5)[:, None]
        u, v = np.broadcast_arrays(u, v)
        sd = _signed_distance_np(kind, params[s], poly[lo:hi], u, v)
        cov = (np.clip(0.5 - sd, 0.0, 1.0) * alphas[s])[..., None]
        region = canvas[r0:r1, c0:c1]
        canvas[r0:r1, c0:c1] = np.where(cov > 0.0, region * (1.0 - cov) + colors[s] * cov, region)
    return canvas


def _shape_bbox_py(kind, prm, pts):
    if kind == ELLIPSE:
        ext = max(prm[2], prm[3])
        return prm[0] - ext, prm[0] + ext, prm[1] - ext, prm[1] + ext
    if kind == CAPSULE:
        r = prm[4]
        return (min(prm[0], prm[2]) - r, max(prm[0], prm[2]) + r,
                min(prm[1], prm[3]) - r, max(prm[1], prm[3]) + r)
    return pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()


class ShapeList:
    """Accumulates soft shapes in pixel coordinates for :func:`raster_soft`."""

    def __init__(self):
        self.kinds = []
        self.params = []
        self.polys = []
        self.colors = []
        self.alphas = []

    def __len__(self):
        return len(self.kinds)

    def _push(self, kind, prm, poly, color, alpha):
        self.kinds.append(kind)
        self.params.append(np.asarray(prm, dtype=np.float64))
        self.polys.append(np.asarray(poly, dtype=np.float64).reshape(-1, 2))
        self.colors.append(np.asarray(color, dtype=np.float64))
        self.alphas.append(float(alpha))

    def ellipse(self, cx, cy, rx, ry, angle, color, alpha=1.0):
        rx = max(float(rx), 1e-3)
        ry = max(float(ry), 1e-3)
        self._push(ELLIPSE, [cx, cy, rx, ry, angle], np.zeros((0, 2)), color, alpha)

    def capsule(self, a, b, radius, color, alpha=1.0):
        self._push(CAPSULE, [a[0], a[1], b[0], b[1], max(float(radius), 1e-3)],
                   np.zeros((0, 2)), color, alpha)

    def polyline(self, pts, radius, color, alpha=1.0):
        pts = np.asarray(pts, dtype=np.float64)
        for a, b in zip(pts[:-1], pts[1:]):
            self.capsule(a, b, radius, color, alpha)

    def polygon(self, pts, color, alpha=1.0):
        self._push(POLYGON, np.zeros(5), pts, color, alpha)

    def packed(self):
        n = len(self.kinds)
        params = np.zeros((n, 5))
        for i, p in enumerate(self.params):
            params[i, : p.size] = p
        sizes = [p.shape[0] for p in self.polys]
        poly_off = np.zeros(n + 1, dtype=np.int64)
        poly_off[1:] = np.cumsum(sizes)
        poly = np.concatenate(self.polys + [np.zeros((0, 2))], axis=0) if n else np.zeros((0, 2))
        return (np.asarray(self.kinds, dtype=np.int64), params,
                np.ascontiguousarray(poly), poly_off,
                np.asarray(self.colors, dtype=np.float64).reshape(n, 3),
                np.asarray(self.alphas, dtype=np.float64))


def raster_soft(shapes, canvas, use_numba=None):
    """Alpha-composite ``shapes`` onto ``canvas`` (float64 ``H x W x 3``) in order.

    Edges are anti-aliased with a one-pixel linear coverage ramp on the signed
    distance. The canvas is modified in place and returned.
    """
    if len(shapes) == 0:
        return canvas
    if use_numba is None:
        use_numba = numba_enabled()
    fn = _raster_soft_nb if use_numba else _raster_soft_np
    return fn(*shapes.packed(), canvas)


raster_soft_nb = _raster_soft_nb
raster_soft_np = _raster_soft_np
raster_capsules_nb = _raster_capsules_nb
raster_capsules_np = _raster_capsules_np
