# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Same signatures and semantics; loops are fused so each kernel makes few passes
over memory instead of one numpy temporary per arithmetic step.  Bulk
exp/tanh are delegated to numpy, whose vectorized transcendentals beat
scalar libm calls by a wide margin.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, floor, sqrtf, floorf

cnp.import_array()

BACKEND = "cython"


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


cdef inline floating _floor(floating x) noexcept nogil:
    if floating is float:
        return floorf(x)
    else:
        return floor(x)


def layernorm_silu_fwd(const floating[:, ::1] x, double eps):
    cdef Py_ssize_t M = x.shape[0], D = x.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    y_arr = np.empty((M, D), dtype=dt)
    xh_arr = np.empty((M, D), dtype=dt)
    rs_arr = np.empty(M, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xh = xh_arr
    cdef floating[::1] rs = rs_arr
    cdef floating mu, var, r, v, feps = <floating>eps
    with nogil:
        for i in range(M):
            mu = 0
            for j in range(D):
                mu = mu + x[i, j]
            mu = mu / D
            var = 0
            for j in range(D):
                v = x[i, j] - mu
                var = var + v * v
            var = var / D
            r = 1 / _sqrt(var + feps)
            rs[i] = r
            for j in range(D):
                v = (x[i, j] - mu) * r
                xh[i, j] = v
                y[i, j] = -v
    # numpy's SIMD exp is several times faster than scalar libm calls
    np.exp(y_arr, out=y_arr)
    with nogil:
        for i in range(M):
            for j in range(D):
                y[i, j] = xh[i, j] / (1 + y[i, j])
    return y_arr, xh_arr, rs_arr


def layernorm_silu_bwd(const floating[:, ::1] gy, const floating[:, ::1] xhat, const floating[::1] rstd):
    cdef Py_ssize_t M = gy.shape[0], D = gy.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.negative(xhat)
    np.exp(gx_arr, out=gx_arr)
    cdef floating[:, ::1] gx = gx_arr
    cdef floating s, g, mg, mgx, v
    with nogil:
        for i in range(M):
            mg = 0
            mgx = 0
            for j in range(D):
                v = xhat[i, j]
                s = 1 / (1 + gx[i, j])
                g = gy[i, j] * (s * (1 + v * (1 - s)))
                gx[i, j] = g
                mg = mg + g
                mgx = mgx + g * v
            mg = mg / D
            mgx = mgx / D
            for j in range(D):
                gx[i, j] = rstd[i] * (gx[i, j] - mg - xhat[i, j] * mgx)
    return gx_arr


def gru_gates_fwd(const floating[:, ::1] gi, const floating[:, ::1] gh, const floating[:, ::1] h_prev):
    cdef Py_ssize_t M = h_prev.shape[0], H = h_prev.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    rz_arr = np.empty((M, 2 * H), dtype=dt)
    n_arr = np.empty((M, H), dtype=dt)
    h_arr = np.empty((M, H), dtype=dt)
    cdef floating[:, ::1] rz = rz_arr
    cdef floating[:, ::1] n = n_arr
    cdef floating[:, ::1] h = h_arr
    with nogil:
        for i in range(M):
            for j in range(2 * H):
                rz[i, j] = -(gi[i, j] + gh[i, j])
    np.exp(rz_arr, out=rz_arr)
    with nogil:
        for i in range(M):
            for j in range(2 * H):
                rz[i, j] = 1 / (1 + rz[i, j])
            for j in range(H):
                n[i, j] = gi[i, 2 * H + j] + rz[i, j] * gh[i, 2 * H + j]
    np.tanh(n_arr, out=n_arr)
    with nogil:
        for i in range(M):
            for j in range(H):
                h[i, j] = n[i, j] + rz[i, H + j] * (h_prev[i, j] - n[i, j])
    return h_arr, rz_arr[:, :H], rz_arr[:, H:], n_arr


def gru_gates_bwd(const floating[:, ::1] gout, const floating[:, :] r, const floating[:, :] z,
                  const floating[:, ::1] n, const floating[:, ::1] gh, const floating[:, ::1] h_prev):
    cdef Py_ssize_t M = h_prev.shape[0], H = h_prev.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    dgi_arr = np.empty((M, 3 * H), dtype=dt)
    dgh_arr = np.empty((M, 3 * H), dtype=dt)
    dhp_arr = np.empty((M, H), dtype=dt)
    cdef floating[:, ::1] dgi = dgi_arr
    cdef floating[:, ::1] dgh = dgh_arr
    cdef floating[:, ::1] dhp = dhp_arr
    cdef floating g, rv, zv, nv, dn_pre, dr_pre, dz_pre
    with nogil:
        for i in range(M):
            for j in range(H):
                g = gout[i, j]
                rv = r[i, j]
                zv = z[i, j]
                nv = n[i, j]
                dhp[i, j] = g * zv
                dn_pre = g * (1 - zv) * (1 - nv * nv)
                dr_pre = dn_pre * gh[i, 2 * H + j] * rv * (1 - rv)
                dz_pre = g * (h_prev[i, j] - nv) * zv * (1 - zv)
                dgi[i, j] = dr_pre
                dgi[i, H + j] = dz_pre
                dgi[i, 2 * H + j] = dn_pre
                dgh[i, j] = dr_pre
                dgh[i, H + j] = dz_pre
                dgh[i, 2 * H + j] = dn_pre * rv
    return dgi_arr, dgh_arr, dhp_arr


def categorical_projection(const floating[:, ::1] probs, const floating[::1] rewards,
                           const floating[::1] discounts, double v_min, double v_max):
    cdef Py_ssize_t M = probs.shape[0], A = probs.shape[1], i, a, lo, up
    dt = np.float32 if floating is float else np.float64
    out_arr = np.zeros((M, A), dtype=dt)
    cdef floating[:, ::1] out = out_arr
    cdef floating fmin = <floating>v_min, fmax = <floating>v_max
    cdef floating dz = (fmax - fmin) / (A - 1)
    cdef floating tz, b, w_up, p
    with nogil:
        for i in range(M):
            for a in range(A):
                tz = rewards[i] + discounts[i] * (fmin + dz * a)
                if tz < fmin:
                    tz = fmin
                elif tz > fmax:
                    tz = fmax
                b = (tz - fmin) / dz
                lo = <Py_ssize_t>_floor(b)
                if lo < 0:
                    lo = 0
                elif lo > A - 1:
                    lo = A - 1
                up = lo + 1
                if up > A - 1:
                    up = A - 1
                w_up = b - lo
                p = probs[i, a]
                out[i, lo] += p * (1 - w_up)
                out[i, up] += p * w_up
    return out_arr


cdef inline floating _edge(Py_ssize_t j, floating lo, floating hi,
                           Py_ssize_t bins) noexcept nogil:
    cdef floating fj = <floating>j, fb = <floating>bins
    if j <= 0:
        return lo
    if j >= bins:
        return hi
    return (lo * (fb - fj) + hi * fj) / fb


def c2f_encode(const floating[::1] actions, const floating[::1] low, const floating[::1] high,
               int levels, int bins):
    cdef Py_ssize_t M = actions.shape[0], i, b
    cdef int lvl
    dt = np.float32 if floating is float else np.float64
    ob_arr = np.empty((levels, M), dtype=np.int64)
    oc_arr = np.empty((levels, M), dtype=dt)
    cdef cnp.int64_t[:, ::1] ob = ob_arr
    cdef floating[:, ::1] oc = oc_arr
    cdef floating lo, hi, w, a, left, right, fb = <floating>bins, half = <floating>0.5
    with nogil:
        for i in range(M):
            lo = low[i]
            hi = high[i]
            a = actions[i]
            for lvl in range(levels):
                w = (hi - lo) / fb
                b = <Py_ssize_t>_floor((a - lo) / w)
                if b < 0:
                    b = 0
                elif b > bins - 1:
                    b = bins - 1
                while b > 0 and a < _edge(b, lo, hi, bins):
                    b = b - 1
                while b < bins - 1 and a >= _edge(b + 1, lo, hi, bins):
                    b = b + 1
                left = _edge(b, lo, hi, bins)
                right = _edge(b + 1, lo, hi, bins)
                ob[lvl, i] = b
                oc[lvl, i] = half * (left + right)
                lo = left
                hi = right
    return ob_arr, oc_arr


def margin_loss_fwd(const floating[:, ::1] q, const cnp.int64_t[::1] expert, double margin):
    cdef Py_ssize_t M = q.shape[0], B = q.shape[1], i, b, arg, e
    dt = np.float32 if floating is float else np.float64
    loss_arr = np.empty(M, dtype=dt)
    arg_arr = np.empty(M, dtype=np.int64)
    cdef floating[::1] loss = loss_arr
    cdef cnp.int64_t[::1] args = arg_arr
    cdef floating best, v, fm = <floating>margin
    with nogil:
        for i in range(M):
            e = expert[i]
            arg = 0
            best = q[i, 0] if e == 0 else q[i, 0] + fm
            for b in range(1, B):
                v = q[i, b] if e == b else q[i, b] + fm
                if v > best:
                    best = v
                    arg = b
            loss[i] = best - q[i, e]
            args[i] = arg
    return loss_arr, arg_arr
