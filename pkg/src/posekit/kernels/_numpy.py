"""Pure-numpy reference implementations of the numeric kernels.

Same signatures as the numba backend; used as the fallback path and as the
comparison baseline in the benchmark.
"""

import numpy as np


def knn_indices(points, k):
    """(N, k) neighbor indices by increasing distance, self excluded.

    Exact distance ties are broken by the smaller point index.
    """
    n = len(points)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def gconv_forward(unit_dirs, valid, feats, nbr_idx, dirs, w, cw, use_max):
    """Graph-convolution responses for all points and output channels.

    unit_dirs: (N, n, 3) unit center-to-neighbor directions, zero rows invalid
    valid:     (N, n) bool, False marks duplicate-point directions
    feats:     (N, Cin)
    nbr_idx:   (N, n) point indices of the neighbors
    dirs/w/cw: kernel directions (Cout, Cin, m, 3), weights (Cout, Cin, m),
               center weights (Cout, Cin)
    Returns (out (N, Cout), arg (N, Cout, Cin, m) int16) where arg holds the
    winning neighbor slot per kernel vector (-1 when no valid neighbor or in
    sum mode).
    """
    N, n = valid.shape
    Cout, Cin, m = w.shape
    out = feats @ cw.T
    arg = np.full((N, Cout, Cin, m), -1, dtype=np.int16)
    nbr_feats = feats[nbr_idx]  # (N, n, Cin)
    for ci in range(Cin):
        # cosines of every kernel vector of this input channel: (N, n, Cout, m)
        cosm = np.einsum("pnd,oid->pnoi", unit_dirs, dirs[:, ci, :, :])
        val = cosm * nbr_feats[:, :, ci][:, :, None, None]
        if use_max:
            masked = np.where(valid[:, :, None, None], val, -np.inf)
            j = masked.argmax(axis=1)  # (N, Cout, m)
            best = np.take_along_axis(masked, j[:, None, :, :], axis=1)[:, 0]
            any_valid = valid.any(axis=1)
            best[~any_valid] = 0.0
            out += np.einsum("poi,oi->po", best, w[:, ci, :])
            arg[:, :, ci, :] = np.where(any_valid[:, None, None], j, -1)
        else:
            val = np.where(valid[:, :, None, None], val, 0.0)
            out += np.einsum("pnoi,oi->po", val, w[:, ci, :])
    return out, arg


def gconv_backward(upstream, unit_dirs, valid, feats, nbr_idx, dirs, w, cw, arg, use_max):
    """Gradients of sum(upstream * out) w.r.t. features and kernel parameters.

    Max selections are treated as fixed at the forward argmax. Direction
    gradients are raw (not tangent-projected).
    """
    N, n = valid.shape
    Cout, Cin, m = w.shape
    d_feats = upstream @ cw  # center terms
    d_dirs = np.zeros_like(dirs)
    d_w = np.zeros_like(w)
    d_cw = upstream.T @ feats
    if use_max:
        sel = arg >= 0
        j = np.clip(arg, 0, n - 1).astype(np.int64)  # (N, Cout, Cin, m)
        p_idx = np.arange(N)[:, None, None, None]
        u_sel = unit_dirs[p_idx, j]  # (N, Cout, Cin, m, 3)
        n_idx = nbr_idx[p_idx, j]  # (N, Cout, Cin, m)
        ci_idx = np.arange(Cin)[None, None, :, None]
        f_sel = feats[n_idx, np.broadcast_to(ci_idx, n_idx.shape)]
        cos_sel = np.einsum("pabmd,abmd->pabm", u_sel, dirs)
        up = upstream[:, :, None, None]
        d_w += np.where(sel, up * cos_sel * f_sel, 0.0).sum(axis=0)
        coef = np.where(sel, up * w[None], 0.0)
        d_dirs += np.einsum("pabm,pabmd->abmd", coef * f_sel, u_sel)
        np.add.at(
            d_feats,
            (n_idx, np.broadcast_to(ci_idx, n_idx.shape)),
            coef * cos_sel,
        )
    else:
        nbr_feats = feats[nbr_idx]  # (N, n, Cin)
        vm = valid.astype(np.float64)
        for ci in range(Cin):
            cosm = np.einsum("pnd,oid->pnoi", unit_dirs, dirs[:, ci, :, :])
            fv = nbr_feats[:, :, ci] * vm  # (N, n)
            d_w[:, ci, :] += np.einsum("po,pnoi,pn->oi", upstream, cosm, fv)
            d_dirs[:, ci, :, :] += np.einsum(
                "po,oi,pn,pnd->oid", upstream, w[:, ci, :], fv, unit_dirs
            )
            contrib = np.einsum("po,oi,pnoi->pn", upstream, w[:, ci, :], cosm) * vm
            np.add.at(d_feats[:, ci], nbr_idx.ravel(), contrib.ravel())
    return d_feats, d_dirs, d_w, d_cw


def chamfer_and_grad(pred, gt):
    """Two-sided sum-of-squared-distances Chamfer and its gradient w.r.t. pred."""
    d2 = ((gt[:, None, :] - pred[None, :, :]) ** 2).sum(-1)  # (N, M)
    j_star = d2.argmin(axis=1)  # nearest pred for each gt point
    i_star = d2.argmin(axis=0)  # nearest gt for each pred point
    n = len(gt)
    mcount = len(pred)
    loss = d2[np.arange(n), j_star].sum() + d2[i_star, np.arange(mcount)].sum()
    grad = 2.0 * (pred - gt[i_star])
    np.add.at(grad, j_star, 2.0 * (pred[j_star] - gt))
    return float(loss), grad


def min_dist_mean(a, b):
    """Mean over rows of a of the distance to the nearest row of b."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.min(axis=1)).mean())


def box_pair_grid_counts(rot_a, c_a, e_a, rot_b, c_b, e_b, lo, hi, res):
    """Count stratified grid cell centers inside both / either box.

    The grid spans [lo, hi) with res cells per axis sampled at cell centers.
    Returns (inside_both, inside_either) as ints.
    """
    step = (hi - lo) / res
    ha = e_a / 2.0
    hb = e_b / 2.0
    inter = 0
    union = 0
    ys = lo[1] + (np.arange(res) + 0.5) * step[1]
    zs = lo[2] + (np.arange(res) + 0.5) * step[2]
    yz = np.stack(np.meshgrid(ys, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    plane = np.empty((len(yz), 3))
    plane[:, 1:] = yz
    for i in range(res):
        plane[:, 0] = lo[0] + (i + 0.5) * step[0]
        qa = np.abs((plane - c_a) @ rot_a)
        qb = np.abs((plane - c_b) @ rot_b)
        in_a = (qa <= ha).all(axis=1)
        in_b = (qb <= hb).all(axis=1)
        inter += int(np.count_nonzero(in_a & in_b))
        union += int(np.count_nonzero(in_a | in_b))
    return inter, union
