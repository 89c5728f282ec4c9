"""Numba-compiled kernels. Mirrors the signatures in _numpy."""

import numpy as np
from numba import njit


@njit(cache=True)
def knn_indices(points, k):
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    d2 = np.empty(n)
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        for q in range(n):
            dx = points[q, 0] - px
            dy = points[q, 1] - py
            dz = points[q, 2] - pz
            d2[q] = dx * dx + dy * dy + dz * dz
        d2[p] = np.inf
        # selection of the k smallest; ties keep the smaller index
        for s in range(k):
            best = np.inf
            bi = -1
            for q in range(n):
                if d2[q] < best:
                    best = d2[q]
                    bi = q
            out[p, s] = bi
            d2[bi] = np.inf
    return out


@njit(cache=True)
def gconv_forward(unit_dirs, valid, feats, nbr_idx, dirs, w, cw, use_max):
    N, n = valid.shape
    Cout, Cin, m = w.shape
    out = np.zeros((N, Cout))
    arg = np.full((N, Cout, Cin, m), -1, dtype=np.int16)
    for p in range(N):
        for co in range(Cout):
            acc = 0.0
            for ci in range(Cin):
                acc += cw[co, ci] * feats[p, ci]
                for i in range(m):
                    dx = dirs[co, ci, i, 0]
                    dy = dirs[co, ci, i, 1]
                    dz = dirs[co, ci, i, 2]
                    if use_max:
                        best = -np.inf
                        bj = -1
                        for j in range(n):
                            if not valid[p, j]:
                                continue
                            c = (
                                dx * unit_dirs[p, j, 0]
                                + dy * unit_dirs[p, j, 1]
                                + dz * unit_dirs[p, j, 2]
                            )
                            v = c * feats[nbr_idx[p, j], ci]
                            if v > best:
                                best = v
                                bj = j
                        if bj >= 0:
                            acc += w[co, ci, i] * best
                            arg[p, co, ci, i] = bj
                    else:
                        s = 0.0
                        for j in range(n):
                            if not valid[p, j]:
                                continue
                            c = (
                                dx * unit_dirs[p, j, 0]
                                + dy * unit_dirs[p, j, 1]
                                + dz * unit_dirs[p, j, 2]
                            )
                            s += c * feats[nbr_idx[p, j], ci]
                        acc += w[co, ci, i] * s
            out[p, co] = acc
    return out, arg


@njit(cache=True)
def gconv_backward(upstream, unit_dirs, valid, feats, nbr_idx, dirs, w, cw, arg, use_max):
    N, n = valid.shape
    Cout, Cin, m = w.shape
    d_feats = np.zeros_like(feats)
    d_dirs = np.zeros_like(dirs)
    d_w = np.zeros_like(w)
    d_cw = np.zeros_like(cw)
    for p in range(N):
        for co in range(Cout):
            up = upstream[p, co]
            if up == 0.0:
                continue
            for ci in range(Cin):
                d_cw[co, ci] += up * feats[p, ci]
                d_feats[p, ci] += up * cw[co, ci]
                for i in range(m):
                    if use_max:
                        j = arg[p, co, ci, i]
                        if j < 0:
                            continue
                        q = nbr_idx[p, j]
                        c = (
                            dirs[co, ci, i, 0] * unit_dirs[p, j, 0]
                            + dirs[co, ci, i, 1] * unit_dirs[p, j, 1]
                            + dirs[co, ci, i, 2] * unit_dirs[p, j, 2]
                        )
                        f = feats[q, ci]
                        wi = w[co, ci, i]
                        d_w[co, ci, i] += up * c * f
                        d_dirs[co, ci, i, 0] += up * wi * f * unit_dirs[p, j, 0]
                        d_dirs[co, ci, i, 1] += up * wi * f * unit_dirs[p, j, 1]
                        d_dirs[co, ci, i, 2] += up * wi * f * unit_dirs[p, j, 2]
                        d_feats[q, ci] += up * wi * c
                    else:
                        wi = w[co, ci, i]
                        for j in range(n):
                            if not valid[p, j]:
                                continue
                            q = nbr_idx[p, j]
                            c = (
                                dirs[co, ci, i, 0] * unit_dirs[p, j, 0]
                                + dirs[co, ci, i, 1] * unit_dirs[p, j, 1]
                                + dirs[co, ci, i, 2] * unit_dirs[p, j, 2]
                            )
                            f = feats[q, ci]
                            d_w[co, ci, i] += up * c * f
                            d_dirs[co, ci, i, 0] += up * wi * f * unit_dirs[p, j, 0]
                            d_dirs[co, ci, i, 1] += up * wi * f * unit_dirs[p, j, 1]
                            d_dirs[co, ci, i, 2] += up * wi * f * unit_dirs[p, j, 2]
                            d_feats[q, ci] += up * wi * c
    return d_feats, d_dirs, d_w, d_cw


@njit(cache=True)
def chamfer_and_grad(pred, gt):
    M = pred.shape[0]
    N = gt.shape[0]
    grad = np.zeros((M, 3))
    loss = 0.0
    for j in range(M):
        best = np.inf
        bi = -1
        for i in range(N):
            dx = gt[i, 0] - pred[j, 0]
            dy = gt[i, 1] - pred[j, 1]
            dz = gt[i, 2] - pred[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bi = i
        loss += best
        grad[j, 0] += 2.0 * (pred[j, 0] - gt[bi, 0])
        grad[j, 1] += 2.0 * (pred[j, 1] - gt[bi, 1])
        grad[j, 2] += 2.0 * (pred[j, 2] - gt[bi, 2])
    for i in range(N):
        best = np.inf
        bj = -1
        for j in range(M):
            dx = gt[i, 0] - pred[j, 0]
            dy = gt[i, 1] - pred[j, 1]
            dz = gt[i, 2] - pred[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bj = j
        loss += best
        grad[bj, 0] += 2.0 * (pred[bj, 0] - gt[i, 0])
        grad[bj, 1] += 2.0 * (pred[bj, 1] - gt[i, 1])
        grad[bj, 2] += 2.0 * (pred[bj, 2] - gt[i, 2])
    return loss, grad


@njit(cache=True)
def min_dist_mean(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        total += np.sqrt(best)
    return total / a.shape[0]


@njit(cache=True)
def box_pair_grid_counts(rot_a, c_a, e_a, rot_b, c_b, e_b, lo, hi, res):
    sx = (hi[0] - lo[0]) / res
    sy = (hi[1] - lo[1]) / res
    sz = (hi[2] - lo[2]) / res
    hax, hay, haz = e_a[0] / 2.0, e_a[1] / 2.0, e_a[2] / 2.0
    hbx, hby, hbz = e_b[0] / 2.0, e_b[1] / 2.0, e_b[2] / 2.0
    inter = 0
    union = 0
    for i in range(res):
        x = lo[0] + (i + 0.5) * sx
        for j in range(res):
            y = lo[1] + (j + 0.5) * sy
            for k in range(res):
                z = lo[2] + (k + 0.5) * sz
                dxa = x - c_a[0]
                dya = y - c_a[1]
                dza = z - c_a[2]
                qx = dxa * rot_a[0, 0] + dya * rot_a[1, 0] + dza * rot_a[2, 0]
                qy = dxa * rot_a[0, 1] + dya * rot_a[1, 1] + dza * rot_a[2, 1]
                qz = dxa * rot_a[0, 2] + dya * rot_a[1, 2] + dza * rot_a[2, 2]
                in_a = abs(qx) <= hax and abs(qy) <= hay and abs(qz) <= haz
                dxb = x - c_b[0]
                dyb = y - c_b[1]
                dzb = z - c_b[2]
                qx = dxb * rot_b[0, 0] + dyb * rot_b[1, 0] + dzb * rot_b[2, 0]
                qy = dxb * rot_b[0, 1] + dyb * rot_b[1, 1] + dzb * rot_b[2, 1]
                qz = dxb * rot_b[0, 2] + dyb * rot_b[1, 2] + dzb * rot_b[2, 2]
                in_b = abs(qx) <= hbx and abs(qy) <= hby and abs(qz) <= hbz
                if in_a and in_b:
                    inter += 1
                if in_a or in_b:
                    union += 1
    return inter, union
