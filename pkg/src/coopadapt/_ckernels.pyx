# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: oriented-box ray casting and rotated BEV IoU.

Both functions mirror ``coopadapt._pykernels`` exactly; the selection between
the two happens in ``coopadapt.kernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt, INFINITY

cnp.import_array()


cdef double _EPS = 1e-9


def raycast(double[:, ::1] origins, double[:, ::1] dirs, double[:, ::1] boxes,
            double max_range, bint ground):
    """Nearest hit of each ray against boxes (cx, cy, cz, l, w, h, yaw) and z=0.

    Returns (t, hit, cos_inc): hit is the box index, -2 for ground, -1 for none.
    """
    cdef Py_ssize_t n_rays = dirs.shape[0]
    cdef Py_ssize_t n_boxes = boxes.shape[0]
    cdef Py_ssize_t shared = origins.shape[0] == 1
    t_out = np.full(n_rays, np.inf)
    hit_out = np.full(n_rays, -1, dtype=np.int64)
    cos_out = np.zeros(n_rays)
    cdef double[::1] t_v = t_out
    cdef long long[::1] hit_v = hit_out
    cdef double[::1] cos_v = cos_out

    cdef double[:, ::1] bc = np.empty((n_boxes, 4))
    cdef Py_ssize_t i, k, a, oi
    for k in range(n_boxes):
        bc[k, 0] = cos(boxes[k, 6])
        bc[k, 1] = sin(boxes[k, 6])
        bc[k, 2] = sqrt(boxes[k, 3] * boxes[k, 3] + boxes[k, 4] * boxes[k, 4]
                        + boxes[k, 5] * boxes[k, 5]) * 0.5
        bc[k, 3] = 0.0

    cdef double ox, oy, oz, dx, dy, dz, best, best_cos
    cdef double px, py, pz, lx, ly, lz, ldx, ldy, ldz
    cdef double tnear, tfar, t1, t2, tmp, half, o_a, d_a, nrm, n_cos
    cdef double cx, cy, cz, c, s, rx, ry, rz, proj, dist2
    cdef int near_axis, best_hit
    cdef double near_sign
    for i in range(n_rays):
        oi = 0 if shared else i
        ox = origins[oi, 0]
        oy = origins[oi, 1]
        oz = origins[oi, 2]
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best = max_range
        best_hit = -1
        best_cos = 0.0
        if ground and dz < -_EPS:
            tmp = -oz / dz
            if tmp > _EPS and tmp <= best:
                best = tmp
                best_hit = -2
                best_cos = -dz
        for k in range(n_boxes):
            cx = boxes[k, 0]
            cy = boxes[k, 1]
            cz = boxes[k, 2]
            # bounding-sphere rejection
            rx = cx - ox
            ry = cy - oy
            rz = cz - oz
            proj = rx * dx + ry * dy + rz * dz
            dist2 = rx * rx + ry * ry + rz * rz - proj * proj
            if dist2 > bc[k, 2] * bc[k, 2]:
                continue
            c = bc[k, 0]
            s = bc[k, 1]
            px = -rx
            py = -ry
            pz = -rz
            lx = c * px + s * py
            ly = -s * px + c * py
            lz = pz
            ldx = c * dx + s * dy
            ldy = -s * dx + c * dy
            ldz = dz
            tnear = -INFINITY
            tfar = INFINITY
            near_axis = -1
            near_sign = 0.0
            for a in range(3):
                if a == 0:
                    o_a = lx
                    d_a = ldx
                    half = boxes[k, 3] * 0.5
                elif a == 1:
                    o_a = ly
                    d_a = ldy
                    half = boxes[k, 4] * 0.5
                else:
                    o_a = lz
                    d_a = ldz
                    half = boxes[k, 5] * 0.5
                if fabs(d_a) < 1e-15:
                    if o_a < -half or o_a > half:
                        tnear = INFINITY
                        break
                    continue
                t1 = (-half - o_a) / d_a
                t2 = (half - o_a) / d_a
                if t1 > t2:
                    tmp = t1
                    t1 = t2
                    t2 = tmp
                if t1 > tnear:
                    tnear = t1
                    near_axis = a
                    near_sign = -1.0 if d_a > 0 else 1.0
                if t2 < tfar:
                    tfar = t2
            if tnear > tfar or tnear <= _EPS or tnear >= best:
                continue
            best = tnear
            best_hit = k
            # incidence cosine against the entry face normal
            if near_axis == 0:
                n_cos = -near_sign * ldx
            elif near_axis == 1:
                n_cos = -near_sign * ldy
            else:
                n_cos = -near_sign * ldz
            best_cos = n_cos
        if best_hit != -1:
            t_v[i] = best
            hit_v[i] = best_hit
            cos_v[i] = best_cos
    return t_out, hit_out, cos_out


cdef int _corners(double x, double y, double l, double w, double yaw,
                  double* out) nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    cdef double lx[4]
    cdef double ly[4]
    lx[0] = hl; ly[0] = hw
    lx[1] = -hl; ly[1] = hw
    lx[2] = -hl; ly[2] = -hw
    lx[3] = hl; ly[3] = -hw
    cdef int k
    for k in range(4):
        out[2 * k] = x + c * lx[k] - s * ly[k]
        out[2 * k + 1] = y + s * lx[k] + c * ly[k]
    return 0


cdef double _clip_area(double* pa, double* pb) nogil:
    # Sutherland-Hodgman: clip polygon pa (4 CCW vertices) by convex pb.
    cdef double poly[32]
    cdef double nxt[32]
    cdef int n = 4, m, e, k
    cdef double ax, ay, bx, by, px, py, qx, qy, cp, cq, r, area
    for k in range(8):
        poly[k] = pa[k]
    for e in range(4):
        if n == 0:
            break
        ax = pb[2 * e]
        ay = pb[2 * e + 1]
        bx = pb[2 * ((e + 1) % 4)]
        by = pb[2 * ((e + 1) % 4) + 1]
        m = 0
        for k in range(n):
            px = poly[2 * k]
            py = poly[2 * k + 1]
            qx = poly[2 * ((k + 1) % n)]
            qy = poly[2 * ((k + 1) % n) + 1]
            cp = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            cq = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            if cp >= 0:
                nxt[2 * m] = px
                nxt[2 * m + 1] = py
                m += 1
                if cq < 0:
                    r = cp / (cp - cq)
                    nxt[2 * m] = px + r * (qx - px)
                    nxt[2 * m + 1] = py + r * (qy - py)
                    m += 1
            elif cq >= 0:
                r = cp / (cp - cq)
                nxt[2 * m] = px + r * (qx - px)
                nxt[2 * m + 1] = py + r * (qy - py)
                m += 1
        n = m
        for k in range(2 * n):
            poly[k] = nxt[k]
    if n < 3:
        return 0.0
    area = 0.0
    for k in range(n):
        area += poly[2 * k] * poly[2 * ((k + 1) % n) + 1] - poly[2 * ((k + 1) % n)] * poly[2 * k + 1]
    return 0.5 * fabs(area)


cdef double _iou_one(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) nogil:
    cdef double pa[8]
    cdef double pb[8]
    cdef double dx = a[i, 0] - b[j, 0], dy = a[i, 1] - b[j, 1]
    cdef double ra = 0.5 * sqrt(a[i, 2] * a[i, 2] + a[i, 3] * a[i, 3])
    cdef double rb = 0.5 * sqrt(b[j, 2] * b[j, 2] + b[j, 3] * b[j, 3])
    if dx * dx + dy * dy >= (ra + rb) * (ra + rb):
        return 0.0
    _corners(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], pa)
    _corners(b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4], pb)
    cdef double inter = _clip_area(pa, pb)
    cdef double union_ = a[i, 2] * a[i, 3] + b[j, 2] * b[j, 3] - inter
    if union_ <= 0:
        return 0.0
    inter = inter / union_
    if inter > 1.0:
        return 1.0
    return inter


def iou_matrix(double[:, ::1] a, double[:, ::1] b):
    """Pairwise rotated IoU between rows of a (N, 5) and b (M, 5): x, y, l, w, yaw."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou_one(a, i, b, j)
    return out


def iou_pairs(double[:, ::1] a, double[:, ::1] b):
    """Row-aligned rotated IoU: out[k] = iou(a[k], b[k])."""
    cdef Py_ssize_t n = a.shape[0], i
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _iou_one(a, i, b, i)
    return out
