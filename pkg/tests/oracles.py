"""Independent reference implementations used only by the tests."""
import itertools
import math

import numpy as np
from scipy import ndimage


def dense_tps_solve(src, dst):
    """Plain (K+3)x(K+3) TPS system solved with a generic solver.

    Returns ``(rbf (K, 2), affine (3, 2))`` with affine rows ordered (x, y, 1) and
    the interpolant ``f(p) = [p, 1] @ affine + sum_k rbf_k U(|p - src_k|)``.
    """
    src = np.asarray(src, dtype=np.float64)
    k = len(src)
    big = np.zeros((k + 3, k + 3))
    for i in range(k):
        for j in range(k):
            r2 = float(np.sum((src[i] - src[j]) ** 2))
            big[i, j] = 0.0 if r2 == 0 else r2 * math.log(r2)
        big[i, k:] = [src[i, 0], src[i, 1], 1.0]
        big[k:, i] = [src[i, 0], src[i, 1], 1.0]
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    sol = np.linalg.solve(big, rhs)
    return sol[:k], sol[k:]


def dense_tps_eval(src, rbf, affine, p):
    p = np.asarray(p, dtype=np.float64)
    out = np.array([p[0], p[1], 1.0]) @ affine
    for s, w in zip(src, rbf):
        r2 = float(np.sum((p - s) ** 2))
        if r2 > 0:
            out = out + w * r2 * math.log(r2)
    return out


def dense_warp(image, src_norm, deltas_px, order=1):
    """Warp by evaluating the TPS independently at every pixel, then interpolating."""
    h, w = image.shape
    dst = src_norm + deltas_px * np.array([2.0 / h, 2.0 / w])
    rbf, aff = dense_tps_solve(src_norm, dst)
    coords = np.zeros((2, h, w))
    for i in range(h):
        for j in range(w):
            p = np.array([(2 * i + 1) / h - 1, (2 * j + 1) / w - 1])
            q = dense_tps_eval(src_norm, rbf, aff, p)
            coords[0, i, j] = ((q[0] + 1) * h - 1) / 2
            coords[1, i, j] = ((q[1] + 1) * w - 1) / 2
    return ndimage.map_coordinates(image, coords, order=order, mode="grid-constant", cval=0.0)


def gaussian_bumps(size, rng, n=3):
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size))
    for _ in range(n):
        c = rng.uniform(0.25, 0.75, 2) * size
        s = rng.uniform(0.08, 0.2) * size
        img += rng.uniform(0.5, 1.0) * np.exp(-((ii - c[0]) ** 2 + (jj - c[1]) ** 2) / (2 * s * s))
    return img


def brute_dice(a, b):
    a = np.asarray(a, dtype=bool).ravel().tolist()
    b = np.asarray(b, dtype=bool).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    tot = sum(a) + sum(b)
    return 1.0 if tot == 0 else 2.0 * inter / tot


def brute_boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    pts.append((i, j))
                    break
    return pts


def brute_hausdorff(a, b, spacing=(1.0, 1.0)):
    pa, pb = brute_boundary(a), brute_boundary(b)

    def d(p, q):
        return math.sqrt(((p[0] - q[0]) * spacing[0]) ** 2 + ((p[1] - q[1]) * spacing[1]) ** 2)

    dab = max(min(d(p, q) for q in pb) for p in pa)
    dba = max(min(d(p, q) for q in pa) for p in pb)
    return max(dab, dba)


def brute_confusion(pred, gold):
    tp = fp = fn = 0
    for p, g in zip(np.asarray(pred, bool).ravel(), np.asarray(gold, bool).ravel()):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    return tp, fp, fn


def small_masks(n=4, max_pixels=2):
    """All ``n x n`` masks with at most ``max_pixels`` foreground pixels."""
    cells = list(itertools.product(range(n), range(n)))
    out = []
    for k in range(max_pixels + 1):
        for combo in itertools.combinations(cells, k):
            m = np.zeros((n, n), dtype=bool)
            for c in combo:
                m[c] = True
            out.append(m)
    return out
