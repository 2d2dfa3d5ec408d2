"""Pure numpy fallback for the compiled kernels in ``_ckernels.pyx``."""
import numpy as np

_EPS = 1e-9


def raycast(origins, dirs, boxes, max_range, ground):
    """Nearest hit of each ray against boxes (cx, cy, cz, l, w, h, yaw) and z=0.

    Returns (t, hit, cos_inc): hit is the box index, -2 for ground, -1 for none.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n = dirs.shape[0]
    if origins.shape[0] == 1:
        origins = np.broadcast_to(origins, dirs.shape)
    best = np.full(n, float(max_range))
    hit = np.full(n, -1, dtype=np.int64)
    cos_inc = np.zeros(n)

    if ground:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dz < -_EPS, -origins[:, 2] / dz, np.inf)
        ok = (tg > _EPS) & (tg <= best)
        best[ok] = tg[ok]
        hit[ok] = -2
        cos_inc[ok] = -dz[ok]

    for k, (cx, cy, cz, l, w, h, yaw) in enumerate(boxes):
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([cx, cy, cz]) - origins
        proj = np.einsum("ij,ij->i", r, dirs)
        dist2 = np.einsum("ij,ij->i", r, r) - proj * proj
        radius = 0.5 * np.sqrt(l * l + w * w + h * h)
        cand = np.nonzero(dist2 <= radius * radius)[0]
        if cand.size == 0:
            continue
        p = -r[cand]
        d = dirs[cand]
        lo = np.stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]], axis=1)
        ld = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
        half = np.array([l, w, h]) * 0.5
        tnear = np.full(cand.size, -np.inf)
        tfar = np.full(cand.size, np.inf)
        near_axis = np.full(cand.size, -1)
        near_sign = np.zeros(cand.size)
        miss = np.zeros(cand.size, dtype=bool)
        for a in range(3):
            o_a, d_a = lo[:, a], ld[:, a]
            flat = np.abs(d_a) < 1e-15
            miss |= flat & ((o_a < -half[a]) | (o_a > half[a]))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half[a] - o_a) / d_a
                t2 = (half[a] - o_a) / d_a
            t_lo = np.where(flat, -np.inf, np.minimum(t1, t2))
            t_hi = np.where(flat, np.inf, np.maximum(t1, t2))
            upd = t_lo > tnear
            tnear = np.where(upd, t_lo, tnear)
            near_axis = np.where(upd, a, near_axis)
            near_sign = np.where(upd, np.where(d_a > 0, -1.0, 1.0), near_sign)
            tfar = np.minimum(tfar, t_hi)
        good = ~miss & (tnear <= tfar) & (tnear > _EPS) & (tnear < best[cand])
        if not good.any():
            continue
        idx = cand[good]
        best[idx] = tnear[good]
        hit[idx] = k
        axis = near_axis[good]
        cos_inc[idx] = -near_sign[good] * ld[good, axis]
    t = np.where(hit != -1, best, np.inf)
    cos_inc[hit == -1] = 0.0
    return t, hit, cos_inc


def _corners(x, y, l, w, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    lx = np.array([0.5 * l, -0.5 * l, -0.5 * l, 0.5 * l])
    ly = np.array([0.5 * w, 0.5 * w, -0.5 * w, -0.5 * w])
    return [(x + c * a - s * b, y + s * a + c * b) for a, b in zip(lx, ly)]


def _clip_area(pa, pb):
    poly = pa
    for e in range(4):
        if not poly:
            break
        ax, ay = pb[e]
        bx, by = pb[(e + 1) % 4]
        out = []
        n = len(poly)
        for k in range(n):
            px, py = poly[k]
            qx, qy = poly[(k + 1) % n]
            cp = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            cq = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            if cp >= 0:
                out.append((px, py))
                if cq < 0:
                    r = cp / (cp - cq)
                    out.append((px + r * (qx - px), py + r * (qy - py)))
            elif cq >= 0:
                r = cp / (cp - cq)
                out.append((px + r * (qx - px), py + r * (qy - py)))
        poly = out
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for k in range(n):
        area += poly[k][0] * poly[(k + 1) % n][1] - poly[(k + 1) % n][0] * poly[k][1]
    return 0.5 * abs(area)


def _iou_one(a, b):
    inter = _clip_area(_corners(*a), _corners(*b))
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def _overlap_candidates(a, b):
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    return ra, rb


def iou_matrix(a, b):
    """Pairwise rotated IoU between rows of a (N, 5) and b (M, 5): x, y, l, w, yaw."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((a.shape[0], b.shape[0]))
    if out.size == 0:
        return out
    ra, rb = _overlap_candidates(a, b)
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    ii, jj = np.nonzero(d2 < (ra[:, None] + rb[None, :]) ** 2)
    for i, j in zip(ii.tolist(), jj.tolist()):
        out[i, j] = _iou_one(a[i].tolist(), b[j].tolist())
    return out


def iou_pairs(a, b):
    """Row-aligned rotated IoU: out[k] = iou(a[k], b[k])."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros(a.shape[0])
    ra, rb = _overlap_candidates(a, b)
    d2 = (a[:, 0] - b[:, 0]) ** 2 + (a[:, 1] - b[:, 1]) ** 2
    for k in np.nonzero(d2 < (ra + rb) ** 2)[0].tolist():
        out[k] = _iou_one(a[k].tolist(), b[k].tolist())
    return out
