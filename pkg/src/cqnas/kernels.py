"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``cqnas._kernels`` is used when it was built; otherwise,
or when ``CQNAS_PURE_PYTHON=1`` is set, the numpy twins in ``_kernels_py``
are used.  The wrappers below accept arrays of any leading shape and flatten
them to the 2-D layout the backends expect.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("CQNAS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def backends():
    """Return every importable backend module, compiled first."""
    mods = []
    try:
        from . import _kernels
        mods.append(_kernels)
    except ImportError:
        pass
    mods.append(_kernels_py)
    return mods


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def layernorm_silu_fwd(x, eps=1e-5, impl=None):
    impl = impl or _impl
    y, xhat, rstd = impl.layernorm_silu_fwd(_rows(x), eps)
    return y.reshape(x.shape), xhat, rstd


def layernorm_silu_bwd(gy, xhat, rstd, impl=None):
    impl = impl or _impl
    return impl.layernorm_silu_bwd(_rows(gy), xhat, rstd).reshape(gy.shape)


def gru_gates_fwd(gi, gh, h_prev, impl=None):
    impl = impl or _impl
    return impl.gru_gates_fwd(_rows(gi), _rows(gh), _rows(h_prev))


def gru_gates_bwd(gout, r, z, n, gh, h_prev, impl=None):
    impl = impl or _impl
    return impl.gru_gates_bwd(_rows(gout), r, z, n, _rows(gh), _rows(h_prev))


def categorical_projection(probs, rewards, discounts, v_min, v_max, impl=None):
    """Batched categorical projection; ``probs`` is (..., A)."""
    impl = impl or _impl
    dt = probs.dtype
    flat = _rows(probs)
    r = np.ascontiguousarray(np.broadcast_to(rewards, probs.shape[:-1]), dtype=dt).reshape(-1)
    d = np.ascontiguousarray(np.broadcast_to(discounts, probs.shape[:-1]), dtype=dt).reshape(-1)
    out = impl.categorical_projection(flat, r, d, float(v_min), float(v_max))
    return out.reshape(probs.shape)


def c2f_encode(actions, low, high, levels, bins, impl=None):
    """Bins and centroids along the zoom path for actions of any shape.

    ``low``/``high`` broadcast against ``actions``.  Returns arrays shaped
    ``(levels,) + actions.shape``.
    """
    impl = impl or _impl
    a = np.ascontiguousarray(actions).reshape(-1)
    lo = np.ascontiguousarray(np.broadcast_to(low, actions.shape), dtype=a.dtype).reshape(-1)
    hi = np.ascontiguousarray(np.broadcast_to(high, actions.shape), dtype=a.dtype).reshape(-1)
    b, c = impl.c2f_encode(a, lo, hi, int(levels), int(bins))
    shape = (levels,) + tuple(actions.shape)
    return b.reshape(shape), c.reshape(shape)


def margin_loss_fwd(q, expert, margin, impl=None):
    """Large-margin loss over the last axis of ``q`` against ``expert``."""
    impl = impl or _impl
    e = np.ascontiguousarray(expert, dtype=np.int64).reshape(-1)
    loss, arg = impl.margin_loss_fwd(_rows(q), e, float(margin))
    return loss.reshape(q.shape[:-1]), arg.reshape(q.shape[:-1])
