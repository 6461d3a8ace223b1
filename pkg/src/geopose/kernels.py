"""Hot numeric kernels with numba and pure-NumPy twin implementations.

Every public name here is bound at import time to one of two variants
(see ``backend.py``): ``<name>_numba`` built from explicit loop bodies
compiled with ``@njit``, or ``<name>_numpy`` written as vectorized NumPy.
Both variants implement identical semantics and are cross-checked in the
test suite; ``benchmarks/bench_kernels.py`` times them against each other.

Residual norms are encoded as integers for kernel dispatch:
    0 = L1, 1 = L2 (vector norm), 2 = Huber(param), 3 = Tukey(param).

Projection convention matches ``geom``: p' = K (R(q) g + x), image point
(u, v) = (p'0 / p'2, p'1 / p'2), depth w' = p'2.
"""

from __future__ import annotations

import numpy as np

from .backend import HAS_NUMBA, USE_NUMBA
from .backend import njit as _njit

NORM_L1 = 0
NORM_L2 = 1
NORM_HUBER = 2
NORM_TUKEY = 3


# ---------------------------------------------------------------------------
# pure-NumPy variants
# ---------------------------------------------------------------------------


def _rotmat_batch(q: np.ndarray) -> np.ndarray:
    """(B, 3, 3) rotation matrices from unit scalar-first quaternions (B, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def _rotmat_grad_batch(q: np.ndarray) -> np.ndarray:
    """(B, 4, 3, 3) derivatives dR/dq_k of the unit-form rotation formula."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((q.shape[0], 4, 3, 3))
    d[:, 0] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    d[:, 1] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2.0 * x, -w], axis=-1),
            np.stack([z, w, -2.0 * x], axis=-1),
        ],
        axis=-2,
    )
    d[:, 2] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2.0 * y], axis=-1),
        ],
        axis=-2,
    )
    d[:, 3] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=-1),
            np.stack([w, -2.0 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return d


def _norm_eval_numpy(r: np.ndarray, code: int, param: float):
    """Value and gradient of the residual norm over the last axis.

    Subgradient conventions: 0 at the L1 kink, 0 at the L2 origin,
    0 outside the Tukey cutoff.
    """
    r = np.asarray(r, dtype=float)
    if code == NORM_L1:
        return np.abs(r).sum(axis=-1), np.sign(r)
    if code == NORM_L2:
        n = np.sqrt((r * r).sum(axis=-1))
        safe = np.where(n == 0.0, 1.0, n)
        grad = r / safe[..., None]
        grad = np.where(n[..., None] == 0.0, 0.0, grad)
        return n, grad
    if code == NORM_HUBER:
        d = param
        a = np.abs(r)
        inside = a <= d
        vals = np.where(inside, 0.5 * r * r, d * (a - 0.5 * d)).sum(axis=-1)
        grad = np.where(inside, r, d * np.sign(r))
        return vals, grad
    if code == NORM_TUKEY:
        c = param
        inside = np.abs(r) <= c
        t = 1.0 - (r / c) ** 2
        vals = np.where(inside, c * c / 6.0 * (1.0 - t**3), c * c / 6.0).sum(axis=-1)
        grad = np.where(inside, r * t * t, 0.0)
        return vals, grad
    raise ValueError(f"unknown norm code {code}")


def project_points_numpy(pos, q4, kmat, pts):
    """Project points (P, 3) under one pose; returns (uv (P, 2), depth (P,)).

    No visibility masking: where |depth| is ~0 the uv entries are inf/nan
    and callers must filter on depth first.
    """
    rm = _rotmat_batch(q4[None])[0]
    p = (kmat @ (pts @ rm.T + pos).T).T
    depth = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = p[:, :2] / depth[:, None]
    return uv, depth


def pose_loss_batch_numpy(pred_pos, pred_qraw, gt_pos, gt_q, code, param):
    """Per-sample position and orientation residual losses with gradients.

    gt_q rows must be canonical unit quaternions; pred_qraw is normalized
    inside, and the returned orientation gradient is w.r.t. the raw head
    output (chained through the normalization Jacobian).

    Returns (lx (B,), lq (B,), dlx_dpos (B, 3), dlq_draw (B, 4)).
    """
    rx = gt_pos - pred_pos
    lx, gx = _norm_eval_numpy(rx, code, param)
    raw_norm = np.sqrt((pred_qraw * pred_qraw).sum(axis=-1))
    u = pred_qraw / raw_norm[:, None]
    rq = gt_q - u
    lq, gq = _norm_eval_numpy(rq, code, param)
    # d lq / d u = -gq; chain through u = raw/|raw|: (I - u u^T)/|raw|
    du = -gq
    radial = (du * u).sum(axis=-1)
    draw = (du - radial[:, None] * u) / raw_norm[:, None]
    return lx, lq, -gx, draw


def project_batch_numpy(pos, q, kmat, pts):
    """Project per-sample point sets (B, P, 3) under per-sample poses.

    q rows must be unit quaternions.  Returns (uv (B, P, 2), depth (B, P));
    entries where |depth| is ~0 come back inf/nan and must be masked by
    the caller.
    """
    rm = _rotmat_batch(q)
    m = kmat[None] @ rm
    kt = pos @ kmat.T
    p = np.einsum("bij,bpj->bpi", m, pts) + kt[:, None, :]
    depth = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = p[..., :2] / depth[..., None]
    return uv, depth


def reproj_loss_batch_numpy(
    gt_uv, gt_w, pred_pos, pred_qraw, kmat, pts, counts, code, param, bounds, min_depth
):
    """Mean reprojection residual per sample with pose gradients.

    gt_uv/gt_w are the label-pose projections of the same points (fixed
    during training, so computed once by the caller).  pts is (B, P, 3)
    padded; counts gives the valid prefix per row.  A point is retained
    when both depths exceed min_depth and the *predicted* projection falls
    inside bounds.  Samples where no point survives get loss 0, zero
    gradients and used == 0 (skip signal).

    Returns (loss (B,), grad_pos (B, 3), grad_qraw (B, 4), used (B,)).
    """
    b_n, p_n = pts.shape[0], pts.shape[1]
    raw_norm = np.sqrt((pred_qraw * pred_qraw).sum(axis=-1))
    u_q = pred_qraw / raw_norm[:, None]
    r_pr = _rotmat_batch(u_q)
    m_pr = kmat[None] @ r_pr
    kt_pr = pred_pos @ kmat.T
    c = np.einsum("bij,bpj->bpi", m_pr, pts) + kt_pr[:, None, :]
    wp = c[..., 2]
    valid = np.arange(p_n)[None, :] < counts[:, None]
    keep = valid & (gt_w > min_depth) & (wp > min_depth)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv_p = c[..., :2] / wp[..., None]
        in_box = (
            (uv_p[..., 0] >= bounds[0])
            & (uv_p[..., 0] <= bounds[1])
            & (uv_p[..., 1] >= bounds[2])
            & (uv_p[..., 1] <= bounds[3])
        )
    keep &= in_box
    used = keep.sum(axis=-1)
    uv_g = gt_uv

    res = np.where(keep[..., None], uv_g - uv_p, 0.0)
    vals, gres = _norm_eval_numpy(res, code, param)
    vals = np.where(keep, vals, 0.0)
    denom = np.maximum(used, 1)
    loss = vals.sum(axis=-1) / denom

    # d loss / d (up, vp) = -gres / used; chain to pred pose params
    s = np.where(keep[..., None], -gres, 0.0) / denom[:, None, None]
    # Jacobian of (up, vp) w.r.t. pred position (columns of K) and u_q
    dm = _rotmat_grad_batch(u_q)
    km = kmat[None, None] @ dm  # (B, 4, 3, 3)
    dc_q = np.einsum("bkij,bpj->bpki", km, pts)  # (B, P, 4, 3)
    wp_safe = np.where(wp == 0.0, 1.0, wp)
    inv_w2 = 1.0 / (wp_safe * wp_safe)
    # position columns: dc/dx_j = K[:, j]
    num_u_pos = kmat[None, None, 0, :] * wp[..., None] - c[..., 0:1] * kmat[None, None, 2, :]
    num_v_pos = kmat[None, None, 1, :] * wp[..., None] - c[..., 1:2] * kmat[None, None, 2, :]
    grad_pos = (
        s[..., 0:1] * num_u_pos * inv_w2[..., None]
        + s[..., 1:2] * num_v_pos * inv_w2[..., None]
    ).sum(axis=1)
    num_u_q = dc_q[..., 0] * wp[..., None] - c[..., 0:1] * dc_q[..., 2]
    num_v_q = dc_q[..., 1] * wp[..., None] - c[..., 1:2] * dc_q[..., 2]
    grad_uq = (
        s[..., 0:1] * num_u_q * inv_w2[..., None]
        + s[..., 1:2] * num_v_q * inv_w2[..., None]
    ).sum(axis=1)
    radial = (grad_uq * u_q).sum(axis=-1)
    grad_qraw = (grad_uq - radial[:, None] * u_q) / raw_norm[:, None]
    zero = used == 0
    loss = np.where(zero, 0.0, loss)
    grad_pos[zero] = 0.0
    grad_qraw[zero] = 0.0
    return loss, grad_pos, grad_qraw, used.astype(np.int64)


def adam_update_numpy(theta, grad, m, v, t, lr, b1, b2, eps):
    """One bias-corrected ADAM step, updating theta/m/v in place."""
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    theta -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# numba loop variants (same semantics, scalar loop bodies)
# ---------------------------------------------------------------------------


def _build_numba():
    @_njit
    def _rotmat_fill(q, r):
        w, x, y, z = q[0], q[1], q[2], q[3]
        r[0, 0] = 1.0 - 2.0 * (y * y + z * z)
        r[0, 1] = 2.0 * (x * y - w * z)
        r[0, 2] = 2.0 * (x * z + w * y)
        r[1, 0] = 2.0 * (x * y + w * z)
        r[1, 1] = 1.0 - 2.0 * (x * x + z * z)
        r[1, 2] = 2.0 * (y * z - w * x)
        r[2, 0] = 2.0 * (x * z - w * y)
        r[2, 1] = 2.0 * (y * z + w * x)
        r[2, 2] = 1.0 - 2.0 * (x * x + y * y)

    @_njit
    def _rotmat_grad_fill(q, d):
        w, x, y, z = q[0], q[1], q[2], q[3]
        d[0, 0, 0] = 0.0
        d[0, 0, 1] = -2.0 * z
        d[0, 0, 2] = 2.0 * y
        d[0, 1, 0] = 2.0 * z
        d[0, 1, 1] = 0.0
        d[0, 1, 2] = -2.0 * x
        d[0, 2, 0] = -2.0 * y
        d[0, 2, 1] = 2.0 * x
        d[0, 2, 2] = 0.0
        d[1, 0, 0] = 0.0
        d[1, 0, 1] = 2.0 * y
        d[1, 0, 2] = 2.0 * z
        d[1, 1, 0] = 2.0 * y
        d[1, 1, 1] = -4.0 * x
        d[1, 1, 2] = -2.0 * w
        d[1, 2, 0] = 2.0 * z
        d[1, 2, 1] = 2.0 * w
        d[1, 2, 2] = -4.0 * x
        d[2, 0, 0] = -4.0 * y
        d[2, 0, 1] = 2.0 * x
        d[2, 0, 2] = 2.0 * w
        d[2, 1, 0] = 2.0 * x
        d[2, 1, 1] = 0.0
        d[2, 1, 2] = 2.0 * z
        d[2, 2, 0] = -2.0 * w
        d[2, 2, 1] = 2.0 * z
        d[2, 2, 2] = -4.0 * y
        d[3, 0, 0] = -4.0 * z
        d[3, 0, 1] = -2.0 * w
        d[3, 0, 2] = 2.0 * x
        d[3, 1, 0] = 2.0 * w
        d[3, 1, 1] = -4.0 * z
        d[3, 1, 2] = 2.0 * y
        d[3, 2, 0] = 2.0 * x
        d[3, 2, 1] = 2.0 * y
        d[3, 2, 2] = 0.0

    @_njit
    def _norm_eval_fill(r, code, param, grad):
        val = 0.0
        n = r.shape[0]
        if code == 0:
            for i in range(n):
                a = r[i]
                val += abs(a)
                grad[i] = 0.0 if a == 0.0 else (1.0 if a > 0.0 else -1.0)
        elif code == 1:
            s = 0.0
            for i in range(n):
                s += r[i] * r[i]
            val = np.sqrt(s)
            if val == 0.0:
                for i in range(n):
                    grad[i] = 0.0
            else:
                for i in range(n):
                    grad[i] = r[i] / val
        elif code == 2:
            d = param
            for i in range(n):
                a = r[i]
                if abs(a) <= d:
                    val += 0.5 * a * a
                    grad[i] = a
                else:
                    val += d * (abs(a) - 0.5 * d)
                    grad[i] = d if a > 0.0 else -d
        else:
            c = param
            for i in range(n):
                a = r[i]
                if abs(a) <= c:
                    t = 1.0 - (a / c) ** 2
                    val += c * c / 6.0 * (1.0 - t * t * t)
                    grad[i] = a * t * t
                else:
                    val += c * c / 6.0
                    grad[i] = 0.0
        return val

    @_njit
    def _mat3_mul(a, b, out):
        for i in range(3):
            for j in range(3):
                out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]

    @_njit
    def _mat3_vec(a, v0, v1, v2, out):
        for i in range(3):
            out[i] = a[i, 0] * v0 + a[i, 1] * v1 + a[i, 2] * v2

    @_njit
    def project_points_nb(pos, q4, kmat, pts):
        p_n = pts.shape[0]
        uv = np.empty((p_n, 2))
        depth = np.empty(p_n)
        rm = np.empty((3, 3))
        m = np.empty((3, 3))
        kt = np.empty(3)
        _rotmat_fill(q4, rm)
        _mat3_mul(kmat, rm, m)
        _mat3_vec(kmat, pos[0], pos[1], pos[2], kt)
        for p in range(p_n):
            c0 = m[0, 0] * pts[p, 0] + m[0, 1] * pts[p, 1] + m[0, 2] * pts[p, 2] + kt[0]
            c1 = m[1, 0] * pts[p, 0] + m[1, 1] * pts[p, 1] + m[1, 2] * pts[p, 2] + kt[1]
            c2 = m[2, 0] * pts[p, 0] + m[2, 1] * pts[p, 1] + m[2, 2] * pts[p, 2] + kt[2]
            depth[p] = c2
            uv[p, 0] = c0 / c2
            uv[p, 1] = c1 / c2
        return uv, depth

    @_njit
    def pose_loss_batch_nb(pred_pos, pred_qraw, gt_pos, gt_q, code, param):
        b_n = pred_pos.shape[0]
        lx = np.empty(b_n)
        lq = np.empty(b_n)
        dpos = np.empty((b_n, 3))
        draw = np.empty((b_n, 4))
        r3 = np.empty(3)
        g3 = np.empty(3)
        r4 = np.empty(4)
        g4 = np.empty(4)
        u = np.empty(4)
        for b in range(b_n):
            for j in range(3):
                r3[j] = gt_pos[b, j] - pred_pos[b, j]
            lx[b] = _norm_eval_fill(r3, code, param, g3)
            for j in range(3):
                dpos[b, j] = -g3[j]
            s = 0.0
            for j in range(4):
                s += pred_qraw[b, j] * pred_qraw[b, j]
            rn = np.sqrt(s)
            for j in range(4):
                u[j] = pred_qraw[b, j] / rn
                r4[j] = gt_q[b, j] - u[j]
            lq[b] = _norm_eval_fill(r4, code, param, g4)
            radial = 0.0
            for j in range(4):
                g4[j] = -g4[j]
                radial += g4[j] * u[j]
            for j in range(4):
                draw[b, j] = (g4[j] - radial * u[j]) / rn
        return lx, lq, dpos, draw

    @_njit
    def project_batch_nb(pos, q, kmat, pts):
        b_n, p_n = pts.shape[0], pts.shape[1]
        uv = np.empty((b_n, p_n, 2))
        depth = np.empty((b_n, p_n))
        rm = np.empty((3, 3))
        m = np.empty((3, 3))
        kt = np.empty(3)
        for b in range(b_n):
            _rotmat_fill(q[b], rm)
            _mat3_mul(kmat, rm, m)
            _mat3_vec(kmat, pos[b, 0], pos[b, 1], pos[b, 2], kt)
            for p in range(p_n):
                g0, g1, g2 = pts[b, p, 0], pts[b, p, 1], pts[b, p, 2]
                c0 = m[0, 0] * g0 + m[0, 1] * g1 + m[0, 2] * g2 + kt[0]
                c1 = m[1, 0] * g0 + m[1, 1] * g1 + m[1, 2] * g2 + kt[1]
                c2 = m[2, 0] * g0 + m[2, 1] * g1 + m[2, 2] * g2 + kt[2]
                depth[b, p] = c2
                uv[b, p, 0] = c0 / c2
                uv[b, p, 1] = c1 / c2
        return uv, depth

    @_njit
    def reproj_loss_batch_nb(
        gt_uv, gt_w, pred_pos, pred_qraw, kmat, pts, counts,
        code, param, bounds, min_depth,
    ):
        b_n = pts.shape[0]
        loss = np.zeros(b_n)
        grad_pos = np.zeros((b_n, 3))
        grad_qraw = np.zeros((b_n, 4))
        used = np.zeros(b_n, dtype=np.int64)
        r_pr = np.empty((3, 3))
        m_pr = np.empty((3, 3))
        kt_p = np.empty(3)
        dr = np.empty((4, 3, 3))
        km = np.empty((4, 3, 3))
        u_q = np.empty(4)
        res = np.empty(2)
        gres = np.empty(2)
        g_uq = np.empty(4)
        for b in range(b_n):
            s = 0.0
            for j in range(4):
                s += pred_qraw[b, j] * pred_qraw[b, j]
            rn = np.sqrt(s)
            for j in range(4):
                u_q[j] = pred_qraw[b, j] / rn
            _rotmat_fill(u_q, r_pr)
            _mat3_mul(kmat, r_pr, m_pr)
            _mat3_vec(kmat, pred_pos[b, 0], pred_pos[b, 1], pred_pos[b, 2], kt_p)
            _rotmat_grad_fill(u_q, dr)
            for k in range(4):
                _mat3_mul(kmat, dr[k], km[k])
            val_sum = 0.0
            gp0 = 0.0
            gp1 = 0.0
            gp2 = 0.0
            for j in range(4):
                g_uq[j] = 0.0
            n_used = 0
            for p in range(counts[b]):
                wg = gt_w[b, p]
                if wg <= min_depth:
                    continue
                g0, g1, g2 = pts[b, p, 0], pts[b, p, 1], pts[b, p, 2]
                c2 = m_pr[2, 0] * g0 + m_pr[2, 1] * g1 + m_pr[2, 2] * g2 + kt_p[2]
                if c2 <= min_depth:
                    continue
                c0 = m_pr[0, 0] * g0 + m_pr[0, 1] * g1 + m_pr[0, 2] * g2 + kt_p[0]
                c1 = m_pr[1, 0] * g0 + m_pr[1, 1] * g1 + m_pr[1, 2] * g2 + kt_p[1]
                up = c0 / c2
                vp = c1 / c2
                if up < bounds[0] or up > bounds[1] or vp < bounds[2] or vp > bounds[3]:
                    continue
                res[0] = gt_uv[b, p, 0] - up
                res[1] = gt_uv[b, p, 1] - vp
                val_sum += _norm_eval_fill(res, code, param, gres)
                n_used += 1
                su = -gres[0] / (c2 * c2)
                sv = -gres[1] / (c2 * c2)
                gp0 += su * (kmat[0, 0] * c2 - c0 * kmat[2, 0]) + sv * (
                    kmat[1, 0] * c2 - c1 * kmat[2, 0]
                )
                gp1 += su * (kmat[0, 1] * c2 - c0 * kmat[2, 1]) + sv * (
                    kmat[1, 1] * c2 - c1 * kmat[2, 1]
                )
                gp2 += su * (kmat[0, 2] * c2 - c0 * kmat[2, 2]) + sv * (
                    kmat[1, 2] * c2 - c1 * kmat[2, 2]
                )
                for k in range(4):
                    d0 = km[k, 0, 0] * g0 + km[k, 0, 1] * g1 + km[k, 0, 2] * g2
                    d1 = km[k, 1, 0] * g0 + km[k, 1, 1] * g1 + km[k, 1, 2] * g2
                    d2 = km[k, 2, 0] * g0 + km[k, 2, 1] * g1 + km[k, 2, 2] * g2
                    g_uq[k] += su * (d0 * c2 - c0 * d2) + sv * (d1 * c2 - c1 * d2)
            used[b] = n_used
            if n_used > 0:
                inv = 1.0 / n_used
                loss[b] = val_sum * inv
                grad_pos[b, 0] = gp0 * inv
                grad_pos[b, 1] = gp1 * inv
                grad_pos[b, 2] = gp2 * inv
                radial = 0.0
                for j in range(4):
                    g_uq[j] *= inv
                    radial += g_uq[j] * u_q[j]
                for j in range(4):
                    grad_qraw[b, j] = (g_uq[j] - radial * u_q[j]) / rn
        return loss, grad_pos, grad_qraw, used

    @_njit
    def adam_update_nb(theta, grad, m, v, t, lr, b1, b2, eps):
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for i in range(theta.shape[0]):
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i]
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i]
            theta[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    return {
        "project_points": project_points_nb,
        "project_batch": project_batch_nb,
        "pose_loss_batch": pose_loss_batch_nb,
        "reproj_loss_batch": reproj_loss_batch_nb,
        "adam_update": adam_update_nb,
    }


_NUMPY_IMPL = {
    "project_points": project_points_numpy,
    "project_batch": project_batch_numpy,
    "pose_loss_batch": pose_loss_batch_numpy,
    "reproj_loss_batch": reproj_loss_batch_numpy,
    "adam_update": adam_update_numpy,
}

_NUMBA_IMPL = _build_numba() if HAS_NUMBA else {}

_ACTIVE = _NUMBA_IMPL if USE_NUMBA else _NUMPY_IMPL

project_points = _ACTIVE["project_points"]
project_batch = _ACTIVE["project_batch"]
pose_loss_batch = _ACTIVE["pose_loss_batch"]
reproj_loss_batch = _ACTIVE["reproj_loss_batch"]
adam_update = _ACTIVE["adam_update"]
