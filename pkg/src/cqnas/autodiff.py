"""Tape-based reverse-mode autodiff over numpy arrays.

Only the primitives the critic and its losses need are provided.  Every op
records a node on the calling thread's tape when gradient recording is on and
at least one input requires a gradient; :func:`backward` walks that tape in
reverse.  Parameters (:class:`Param`) carry their AdamW moments.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels

LN_EPS = 1e-5


class _State(threading.local):
    def __init__(self):
        self.enabled = True
        self.tape = []


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, target computation)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


def clear_tape():
    _state.tape.clear()


def tape_size() -> int:
    return len(_state.tape)


class Tensor:
    """An array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Param(Tensor):
    """A trainable tensor with AdamW state.

    ``grad`` is always allocated and accumulates across backward calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name=""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _state.tape.append(out)
    return out


def _accum(t: Tensor, g, owned=False):
    """Add ``g`` into ``t.grad``; ``owned`` arrays are adopted without a copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.dtype == t.data.dtype and g.shape == t.data.shape and g.flags.writeable:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``.grad`` of every parameter reachable from scalar ``loss``.

    Parameter gradients accumulate across calls; intermediate gradients are
    reset on each call so the tape can be walked more than once.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _state.tape
    for node in tape:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _node(x.data * c, (x,), lambda g: _accum(x, g * c))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: _accum(x, 2 * g * x.data))


def absolute(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: _accum(x, g * np.sign(x.data)))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _node(y, (x,), lambda g: _accum(x, g * y * (1 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: _accum(x, g * (1 - y * y)))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(x.data * s, (x,), lambda g: _accum(x, g * s * (1 + x.data * (1 - s))))


def layernorm(x: Tensor, eps=LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g):
        gx = rstd * (g - g.mean(axis=-1, keepdims=True)
                     - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
        _accum(x, gx)

    return _node(xhat, (x,), bw)


def silu_layernorm(x: Tensor, eps=LN_EPS) -> Tensor:
    """SiLU(LayerNorm(x)), fused; the activation stack after every linear."""
    if x.shape[-1] < 2:
        raise ValueError("layer norm needs at least 2 features")
    y, xhat, rstd = kernels.layernorm_silu_fwd(x.data, eps)

    def bw(g):
        _accum(x, kernels.layernorm_silu_bwd(g, xhat, rstd), owned=True)

    return _node(y, (x,), bw)


# ---------------------------------------------------------------- structure


def _matmul(a, b):
    """``a @ b`` for 2-D ``b``, as one GEMM over the flattened leading axes of ``a``."""
    if a.ndim <= 2:
        return a @ b
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))


def linear(x: Tensor, W: Tensor) -> Tensor:
    """Bias-free affine map ``x @ W.T`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {W.shape[1]}")
    y = _matmul(x.data, W.data.T)

    def bw(g):
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accum(W, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if x.requires_grad:
            _accum(x, _matmul(g, W.data), owned=True)

    return _node(y, (x, W), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g: _accum(x, _unbroadcast(g, x.shape)))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(x, g[tuple(idx)])

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def take_along(x: Tensor, index, axis) -> Tensor:
    """Gather one entry along ``axis``; ``index`` has size 1 on that axis."""
    axis = axis % x.ndim
    index = np.asarray(index)
    if index.ndim != x.ndim or index.shape[axis] != 1:
        raise ValueError("take_along gathers exactly one entry per slice")
    index = np.broadcast_to(index, tuple(1 if i == axis else n for i, n in enumerate(x.shape)))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index, g, axis=axis)
        _accum(x, gx)

    return _node(np.take_along_axis(x.data, index, axis=axis), (x,), bw)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _node(y, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- softmax family


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax(x.data))

    def bw(g):
        _accum(x, p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return _node(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    ls = _log_softmax(x.data)

    def bw(g):
        _accum(x, g - np.exp(ls) * g.sum(axis=-1, keepdims=True))

    return _node(ls, (x,), bw)


def softmax_cross_entropy(logits: Tensor, target, check=True) -> Tensor:
    """Cross-entropy of ``softmax(logits)`` against ``target`` over the last axis.

    Returns one loss per leading index (a 0-d tensor for 1-D logits).
    """
    target = np.asarray(target, dtype=logits.dtype)
    if check and (np.any(target < 0)
                  or np.any(np.abs(target.sum(axis=-1, dtype=np.float64) - 1) > 1e-6)):
        raise ValueError("target must be a probability distribution over the last axis")
    ls = _log_softmax(logits.data)
    loss = -np.sum(target * ls, axis=-1)

    def bw(g):
        p = np.exp(ls)
        _accum(logits, g[..., None] * (p * target.sum(axis=-1, keepdims=True) - target))

    return _node(loss, (logits,), bw)


def dueling(val: Tensor, adv: Tensor, axis=-2) -> Tensor:
    """``val + adv - mean(adv)`` along ``axis``; ``val`` broadcasts over it."""
    a = adv.data
    y = a - a.mean(axis=axis, keepdims=True)
    y += val.data

    def bw(g):
        if val.requires_grad:
            _accum(val, _unbroadcast(g, val.shape))
        if adv.requires_grad:
            _accum(adv, g - g.mean(axis=axis, keepdims=True), owned=True)

    return _node(y, (val, adv), bw)


def expectation(logits: Tensor, support) -> Tensor:
    """``sum(softmax(logits) * support)`` over the last axis."""
    support = np.asarray(support, dtype=logits.dtype)
    p = np.exp(_log_softmax(logits.data))
    q = p @ support

    def bw(g):
        gl = support - q[..., None]
        gl *= p
        gl *= g[..., None]
        _accum(logits, gl, owned=True)

    return _node(q, (logits,), bw)


def margin_loss(q: Tensor, expert, margin: float) -> Tensor:
    """``max_b(q_b + margin*[b != expert]) - q_expert`` over the last axis."""
    expert = np.asarray(expert, dtype=np.int64)
    loss, arg = kernels.margin_loss_fwd(q.data, expert, margin)

    def bw(g):
        gq = np.zeros_like(q.data)
        np.put_along_axis(gq, arg[..., None], g[..., None], axis=-1)
        e = expert[..., None]
        np.put_along_axis(gq, e, np.take_along_axis(gq, e, axis=-1) - g[..., None], axis=-1)
        _accum(q, gq)

    return _node(loss, (q,), bw)


# ---------------------------------------------------------------- recurrent


def gru_cell(x: Tensor, h: Tensor, W_ih: Tensor, W_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step, gates ordered reset, update, candidate.

    h' = (1 - z) * n + z * h with r, z = sigmoid(...), n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
    """
    x, h = as_tensor(x), as_tensor(h)
    H = W_hh.shape[1]
    if x.shape[-1] != W_ih.shape[1] or h.shape[-1] != H:
        raise ValueError("gru_cell: input or hidden size does not match the weights")
    lead = h.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    hd = h.data.reshape(-1, H)
    gi = xd @ W_ih.data.T + b_ih.data
    gh = hd @ W_hh.data.T + b_hh.data
    hn, r, z, n = kernels.gru_gates_fwd(gi, gh, hd)

    def bw(g):
        dgi, dgh, dhp = kernels.gru_gates_bwd(g.reshape(-1, H), r, z, n, gh, hd)
        _accum(W_ih, dgi.T @ xd)
        _accum(W_hh, dgh.T @ hd)
        _accum(b_ih, dgi.sum(axis=0))
        _accum(b_hh, dgh.sum(axis=0))
        if x.requires_grad:
            _accum(x, (dgi @ W_ih.data).reshape(x.shape))
        if h.requires_grad:
            _accum(h, (dhp + dgh @ W_hh.data).reshape(h.shape))

    return _node(hn.reshape(lead + (H,)), (x, h, W_ih, W_hh, b_ih, b_hh), bw)


def gru(xs: Tensor, W_ih: Tensor, W_hh: Tensor, b_ih: Tensor, b_hh: Tensor, h0=None) -> Tensor:
    """Unidirectional GRU over axis -2 of ``xs`` (..., T, in) -> (..., T, H).

    Fused over time: the input projection is one matmul for all steps and
    backpropagation through time happens inside a single tape node.
    """
    xs = as_tensor(xs)
    H = W_hh.shape[1]
    if xs.shape[-1] != W_ih.shape[1]:
        raise ValueError("gru: input size does not match the weights")
    lead, T = xs.shape[:-2], xs.shape[-2]
    M = int(np.prod(lead)) if lead else 1
    xd = xs.data.reshape(M, T, xs.shape[-1])
    gi_all = _matmul(xd, W_ih.data.T) + b_ih.data  # (M, T, 3H)
    h = np.zeros((M, H), dtype=xs.dtype) if h0 is None else np.asarray(h0, dtype=xs.dtype).reshape(M, H)
    out = np.empty((M, T, H), dtype=xs.dtype)
    saved = []
    for t in range(T):
        gi = np.ascontiguousarray(gi_all[:, t])
        gh = h @ W_hh.data.T + b_hh.data
        hn, r, z, n = kernels.gru_gates_fwd(gi, gh, h)
        saved.append((r, z, n, gh, h))
        out[:, t] = hn
        h = hn

    def bw(g):
        g = g.reshape(M, T, H)
        dgi_all = np.empty((M, T, 3 * H), dtype=xs.dtype)
        dW_hh = np.zeros_like(W_hh.data)
        db_hh = np.zeros_like(b_hh.data)
        carry = np.zeros((M, H), dtype=xs.dtype)
        for t in range(T - 1, -1, -1):
            r, z, n, gh, hp = saved[t]
            dgi, dgh, dhp = kernels.gru_gates_bwd(g[:, t] + carry, r, z, n, gh, hp)
            dgi_all[:, t] = dgi
            dW_hh += dgh.T @ hp
            db_hh += dgh.sum(axis=0)
            carry = dhp + dgh @ W_hh.data
        flat = dgi_all.reshape(M * T, 3 * H)
        _accum(W_ih, flat.T @ xd.reshape(M * T, -1))
        _accum(b_ih, flat.sum(axis=0))
        _accum(W_hh, dW_hh)
        _accum(b_hh, db_hh)
        if xs.requires_grad:
            _accum(xs, (flat @ W_ih.data).reshape(xs.shape), owned=True)

    return _node(out.reshape(lead + (T, H)), (xs, W_ih, W_hh, b_ih, b_hh), bw)


# ---------------------------------------------------------------- init


def uniform_fan_in(rng, out_dim, in_dim, dtype=np.float64):
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)


def orthogonal(rng, n, dtype=np.float64):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


# ---------------------------------------------------------------- optimizer


def adamw_step(params, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update with decoupled weight decay and bias correction."""
    b1, b2 = betas
    for p in params:
        p.step += 1
        g = p.grad
        if wd:
            p.data *= p.data.dtype.type(1.0 - lr * wd)
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * g * g
        mhat = p.m / (1 - b1 ** p.step)
        vhat = p.v / (1 - b2 ** p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


class AdamW:
    def __init__(self, params, lr=5e-5, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adamw_step(self.params, self.lr, self.weight_decay, self.betas, self.eps)
        clear_tape()


# ---------------------------------------------------------------- checks


def numerical_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Max elementwise relative error with a floor that ignores round-off-sized gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradcheck(loss_fn, tensors, h=1e-5):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``loss_fn`` builds a fresh scalar Tensor from ``tensors`` (Params or
    Tensors with ``requires_grad``).  Returns the worst relative error.
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data) if isinstance(t, Param) else None
    clear_tape()
    loss = loss_fn()
    backward(loss)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors]
    clear_tape()
    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            gn = numerical_grad(lambda: float(loss_fn().data), t.data, h)
            worst = max(worst, rel_error(ga, gn))
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, named_arrays):
    """Write ``{name: array}`` as a text header plus little-endian float32 data.

    The header has one ``name dim0 dim1 ...`` line per tensor and ends with a
    blank line; the payload is every tensor flattened in header order.
    """
    lines = []
    for name, arr in named_arrays.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"bad tensor name {name!r}")
        lines.append(" ".join([name] + [str(d) for d in np.shape(arr)]))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for arr in named_arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``{name: float32 array}``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError("checkpoint header is not terminated by a blank line")
    header = raw[:end].decode("ascii").splitlines() if end else []
    offset = end + 2
    out = {}
    for line in header:
        name, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(raw):
        raise ValueError("checkpoint payload size does not match its header")
    return out
