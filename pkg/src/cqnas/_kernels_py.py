"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Inputs are expected to be C-contiguous 2-D arrays (rows x features) of
float32 or float64; outputs keep the input dtype.
"""
import numpy as np

BACKEND = "python"


def layernorm_silu_fwd(x, eps):
    """SiLU(LayerNorm(x)) over the last axis.

    Returns ``(y, xhat, rstd)``; ``xhat`` and ``rstd`` are saved for backward.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat / (1.0 + np.exp(-xhat))
    return y, xhat, rstd[:, 0]


def layernorm_silu_bwd(gy, xhat, rstd):
    s = 1.0 / (1.0 + np.exp(-xhat))
    g = gy * (s * (1.0 + xhat * (1.0 - s)))
    mg = g.mean(axis=-1, keepdims=True)
    mgx = np.mean(g * xhat, axis=-1, keepdims=True)
    return rstd[:, None] * (g - mg - xhat * mgx)


def gru_gates_fwd(gi, gh, h_prev):
    """Pointwise part of a GRU step.

    ``gi`` and ``gh`` are the input and hidden projections (bias included),
    laid out as [reset | update | candidate] blocks of width H.
    Returns ``(h, r, z, n)``.
    """
    H = h_prev.shape[1]
    r = 1.0 / (1.0 + np.exp(-(gi[:, :H] + gh[:, :H])))
    z = 1.0 / (1.0 + np.exp(-(gi[:, H:2 * H] + gh[:, H:2 * H])))
    n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
    h = n + z * (h_prev - n)
    return h, r, z, n


def gru_gates_bwd(gout, r, z, n, gh, h_prev):
    """Backward of :func:`gru_gates_fwd`.

    Returns ``(d_gi, d_gh, d_hprev)`` where ``d_hprev`` only covers the direct
    path through the update gate; the caller adds ``d_gh @ W_hh``.
    """
    H = h_prev.shape[1]
    dn = gout * (1.0 - z)
    dz = gout * (h_prev - n)
    dh_prev = gout * z
    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * gh[:, 2 * H:]
    dr_pre = dr * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    d_gi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    d_gh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
    return d_gi, d_gh, dh_prev


def categorical_projection(probs, rewards, discounts, v_min, v_max):
    """Project ``rewards + discounts * z`` back onto the fixed atom grid.

    ``probs`` is (M, A); ``rewards`` and ``discounts`` are length M.
    """
    M, A = probs.shape
    dz = (v_max - v_min) / (A - 1)
    atoms = v_min + dz * np.arange(A, dtype=probs.dtype)
    tz = rewards[:, None] + discounts[:, None] * atoms[None, :]
    np.clip(tz, v_min, v_max, out=tz)
    b = (tz - v_min) / dz
    lo = np.floor(b).astype(np.int64)
    np.clip(lo, 0, A - 1, out=lo)
    up = np.minimum(lo + 1, A - 1)
    w_up = b - lo.astype(probs.dtype)
    # b landing exactly on an atom gives w_up == 0 and all mass to lo
    out = np.zeros((M, A), dtype=probs.dtype)
    rows = np.repeat(np.arange(M), A) * A
    np.add.at(out.reshape(-1), rows + lo.reshape(-1), (probs * (1.0 - w_up)).reshape(-1))
    np.add.at(out.reshape(-1), rows + up.reshape(-1), (probs * w_up).reshape(-1))
    return out


def c2f_encode(actions, low, high, levels, bins):
    """Locate ``actions`` (M,) along the coarse-to-fine zoom path.

    ``low``/``high`` are per-row bounds of shape (M,).  Returns
    ``(bin_index int64 (L, M), centroid (L, M))`` with zero-based bins.
    """
    dt = actions.dtype
    lo = low.astype(dt, copy=True)
    hi = high.astype(dt, copy=True)
    M = actions.shape[0]
    out_b = np.empty((levels, M), dtype=np.int64)
    out_c = np.empty((levels, M), dtype=dt)

    def edge(j, lo, hi):
        # interior edges as a weighted mean so decimal-exact edges such as
        # 0.6 on [-1, 1] round to the nearest float; the end edges are exact
        jf = j.astype(dt)
        e = (lo * (dt.type(bins) - jf) + hi * jf) / dt.type(bins)
        e = np.where(j <= 0, lo, e)
        return np.where(j >= bins, hi, e)

    for lvl in range(levels):
        w = (hi - lo) / dt.type(bins)
        b = np.floor((actions - lo) / w).astype(np.int64)
        np.clip(b, 0, bins - 1, out=b)
        while True:
            down = (b > 0) & (actions < edge(b, lo, hi))
            up = (b < bins - 1) & (actions >= edge(b + 1, lo, hi))
            if not (down.any() or up.any()):
                break
            b = b - down + up
        left = edge(b, lo, hi)
        right = edge(b + 1, lo, hi)
        out_b[lvl] = b
        out_c[lvl] = dt.type(0.5) * (left + right)
        lo, hi = left, right
    return out_b, out_c


def margin_loss_fwd(q, expert, margin):
    """Large-margin loss per row of ``q`` (M, B) against expert bins (M,).

    Returns ``(loss (M,), argmax (M,))`` where argmax is the index achieving
    the margin-augmented max (lowest index on ties).
    """
    aug = q + margin
    rows = np.arange(q.shape[0])
    aug[rows, expert] = q[rows, expert]
    arg = np.argmax(aug, axis=1)
    return aug[rows, arg] - q[rows, expert], arg
