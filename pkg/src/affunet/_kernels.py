"""Serial numba kernels: bilinear gather/scatter and triangle rasterization.

All loops are single-threaded and visit elements in a fixed order, so results
are bit-reproducible.
"""
import math

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True, fastmath=False)


@_jit
def bilinear_forward(fmap, coords, out):
    # fmap [B,H,W,C] channels-last, coords [B,P,2], out [B,P,C]
    nb, h, w, nc = fmap.shape
    npts = coords.shape[1]
    for b in range(nb):
        for p in range(npts):
            x = coords[b, p, 0]
            y = coords[b, p, 1]
            x0f = math.floor(x)
            y0f = math.floor(y)
            fx = x - x0f
            fy = y - y0f
            x0 = int(x0f)
            y0 = int(y0f)
            in_x0 = 0 <= x0 < w
            in_x1 = 0 <= x0 + 1 < w
            in_y0 = 0 <= y0 < h
            in_y1 = 0 <= y0 + 1 < h
            # nested lerps rather than a four-term weighted sum: a constant map
            # reproduces its value exactly
            for c in range(nc):
                v00 = fmap[b, y0, x0, c] if in_y0 and in_x0 else 0.0
                v01 = fmap[b, y0, x0 + 1, c] if in_y0 and in_x1 else 0.0
                v10 = fmap[b, y0 + 1, x0, c] if in_y1 and in_x0 else 0.0
                v11 = fmap[b, y0 + 1, x0 + 1, c] if in_y1 and in_x1 else 0.0
                top = v00 + fx * (v01 - v00)
                bot = v10 + fx * (v11 - v10)
                out[b, p, c] = top + fy * (bot - top)


@_jit
def bilinear_backward(fmap, coords, grad_out, grad_map, grad_coords, need_map, need_coords):
    nb, h, w, nc = fmap.shape
    npts = coords.shape[1]
    for b in range(nb):
        for p in range(npts):
            x = coords[b, p, 0]
            y = coords[b, p, 1]
            x0f = math.floor(x)
            y0f = math.floor(y)
            fx = x - x0f
            fy = y - y0f
            x0 = int(x0f)
            y0 = int(y0f)
            gx = 0.0
            gy = 0.0
            for corner in range(4):
                ox = corner & 1
                oy = corner >> 1
                xi = x0 + ox
                yi = y0 + oy
                if xi < 0 or xi >= w or yi < 0 or yi >= h:
                    continue
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                dwx = 1.0 if ox else -1.0
                dwy = 1.0 if oy else -1.0
                wgt = wx * wy
                acc = 0.0
                for c in range(nc):
                    g = grad_out[b, p, c]
                    if need_map:
                        grad_map[b, yi, xi, c] += wgt * g
                    acc += g * fmap[b, yi, xi, c]
                gx += dwx * wy * acc
                gy += wx * dwy * acc
            if need_coords:
                grad_coords[b, p, 0] = gx
                grad_coords[b, p, 1] = gy


@_jit
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@_jit
def _top_left(ax, ay, bx, by, ccw):
    # Edge ownership for pixels exactly on an edge; y grows downward.
    dx = bx - ax
    dy = by - ay
    if not ccw:
        dx = -dx
        dy = -dy
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


@_jit
def rasterize(px_xy, depth, faces, height, width, use_depth, face_id, bary, zbuf, eps_area):
    """Rasterize triangles at pixel centers (j + 0.5, i + 0.5).

    px_xy [N,2] vertex positions in pixel units, depth [N] (larger = nearer).
    Writes face_id [H,W] (-1 when uncovered), bary [H,W,3], zbuf [H,W].
    Without ``use_depth`` the first covering face in face order wins.
    """
    nf = faces.shape[0]
    for f in range(nf):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax = px_xy[i0, 0]
        ay = px_xy[i0, 1]
        bx = px_xy[i1, 0]
        by = px_xy[i1, 1]
        cx = px_xy[i2, 0]
        cy = px_xy[i2, 1]
        area = _edge(ax, ay, bx, by, cx, cy)
        if abs(area) <= eps_area:
            continue
        ccw = area > 0.0
        xmin = max(int(math.floor(min(ax, bx, cx) - 0.5)), 0)
        xmax = min(int(math.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        ymin = max(int(math.floor(min(ay, by, cy) - 0.5)), 0)
        ymax = min(int(math.ceil(max(ay, by, cy) - 0.5)), height - 1)
        tl0 = _top_left(bx, by, cx, cy, ccw)
        tl1 = _top_left(cx, cy, ax, ay, ccw)
        tl2 = _top_left(ax, ay, bx, by, ccw)
        for i in range(ymin, ymax + 1):
            py = i + 0.5
            for j in range(xmin, xmax + 1):
                pxx = j + 0.5
                w0 = _edge(bx, by, cx, cy, pxx, py)
                w1 = _edge(cx, cy, ax, ay, pxx, py)
                w2 = _edge(ax, ay, bx, by, pxx, py)
                if not ccw:
                    w0 = -w0
                    w1 = -w1
                    w2 = -w2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                s = w0 + w1 + w2
                b0 = w0 / s
                b1 = w1 / s
                b2 = w2 / s
                z = b0 * depth[i0] + b1 * depth[i1] + b2 * depth[i2]
                if face_id[i, j] >= 0:
                    if not use_depth:
                        continue
                    if z <= zbuf[i, j]:
                        continue
                face_id[i, j] = f
                zbuf[i, j] = z
                bary[i, j, 0] = b0
                bary[i, j, 1] = b1
                bary[i, j, 2] = b2


def rasterize_np(px_xy, depth, faces, height, width, use_depth=True, eps_area=0.0):
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), -np.inf, dtype=np.float64)
    rasterize(
        np.ascontiguousarray(px_xy, dtype=np.float64),
        np.ascontiguousarray(depth, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        height,
        width,
        use_depth,
        face_id,
        bary,
        zbuf,
        eps_area,
    )
    return face_id, bary, zbuf
