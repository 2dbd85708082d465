"""Coarse-to-fine action discretization.

Every level splits the current interval of each action dimension into ``B``
uniform bins; picking a bin zooms the interval into it.  Bins are half-open
``[lo, hi)`` except the last one, which is closed, so every in-range action
falls in exactly one bin.  Bin indices are zero-based throughout.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels

#: actions this far outside the bounds are clamped instead of rejected
CLAMP_TOL = 1e-6


class ControlSemantics(str, enum.Enum):
    POSITION = "position"
    TORQUE = "torque"


@dataclass(frozen=True)
class ActionSpaceSpec:
    dims: int
    levels: int = 3
    bins: int = 5
    low: tuple = None
    high: tuple = None
    semantics: ControlSemantics = ControlSemantics.POSITION

    def __post_init__(self):
        if self.dims < 1 or self.levels < 1 or self.bins < 2:
            raise ValueError("need dims >= 1, levels >= 1 and bins >= 2")
        low = (-1.0,) * self.dims if self.low is None else tuple(float(v) for v in np.broadcast_to(self.low, (self.dims,)))
        high = (1.0,) * self.dims if self.high is None else tuple(float(v) for v in np.broadcast_to(self.high, (self.dims,)))
        if any(lo >= hi for lo, hi in zip(low, high)):
            raise ValueError("action bounds need low < high in every dimension")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "semantics", ControlSemantics(self.semantics))

    @property
    def low_array(self):
        return np.asarray(self.low)

    @property
    def high_array(self):
        return np.asarray(self.high)

    def finest_width(self):
        return (self.high_array - self.low_array) / self.bins ** self.levels

    def root(self) -> "IntervalBox":
        return IntervalBox(self.low_array, self.high_array)


@dataclass(frozen=True)
class IntervalBox:
    """Per-dimension interval ``[low, high]``; the zoom state of one action."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if low.shape != high.shape or np.any(~(low < high)):
            raise ValueError("interval box needs low < high elementwise")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def width(self):
        return self.high - self.low


@dataclass
class LevelPath:
    """Chosen bin and its centroid per level for one action (or a batch).

    Arrays are shaped ``(levels,) + action_shape``.  The level-0 conditioning
    action (the zero vector) is not stored; see :meth:`previous`.
    """

    bins: np.ndarray
    centroids: np.ndarray
    qvalues: np.ndarray = field(default=None, repr=False)

    @property
    def levels(self):
        return self.bins.shape[0]

    def decode(self):
        return self.centroids[-1]

    def previous(self, level):
        """Conditioning action for ``level``: the previous level's centroids."""
        if level == 0:
            return np.zeros_like(self.centroids[0])
        return self.centroids[level - 1]


def bin_edges(low, high, B):
    """The ``B + 1`` edges of a uniform partition, per dimension (last axis)."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    j = np.arange(B + 1, dtype=np.float64)
    e = (low[..., None] * (B - j) + high[..., None] * j) / B
    e[..., 0] = low
    e[..., -1] = high
    return e


def zoom_bounds(low, high, b, B):
    """Edges of bin ``b`` of ``[low, high]`` elementwise, in the dtype of ``low``.

    Uses the same edge arithmetic as the encoder kernel so that greedy
    zooming and re-encoding its output land on identical intervals.
    """
    dt = np.asarray(low).dtype
    fb = dt.type(B)

    def edge(j):
        jf = j.astype(dt)
        e = (low * (fb - jf) + high * jf) / fb
        e = np.where(j <= 0, low, e)
        return np.where(j >= B, high, e)

    b = np.asarray(b, dtype=np.int64)
    return edge(b), edge(b + 1)


def discretize(iv: IntervalBox, B: int):
    """Split each dimension of ``iv`` into ``B`` bins.

    Returns ``(lows, highs, centroids)``, each shaped (dims, B).
    """
    e = bin_edges(iv.low, iv.high, B)
    lows, highs = e[..., :-1], e[..., 1:]
    return lows, highs, 0.5 * (lows + highs)


def zoom_in(iv: IntervalBox, bin_index, B: int) -> IntervalBox:
    """Zoom ``iv`` into the selected bin of every dimension."""
    idx = np.broadcast_to(np.asarray(bin_index), iv.low.shape)
    if np.any((idx < 0) | (idx >= B)):
        raise ValueError(f"bin index out of range [0, {B})")
    lows, highs, _ = discretize(iv, B)
    rows = np.arange(iv.low.shape[0])
    return IntervalBox(lows[rows, idx], highs[rows, idx])


def check_actions(actions, low, high, tol=CLAMP_TOL):
    """Validate and clamp actions against bounds.

    NaNs and violations beyond ``tol`` raise ValueError; smaller overshoot is
    clamped.
    """
    a = np.asarray(actions)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if np.isnan(a).any():
        raise ValueError("NaN action")
    low = np.asarray(low, dtype=a.dtype)
    high = np.asarray(high, dtype=a.dtype)
    if np.any(a < low - tol) or np.any(a > high + tol):
        raise ValueError("action outside bounds")
    return np.clip(a, low, high)


def locate_bin(iv: IntervalBox, a, B: int):
    """Index of the bin of ``iv`` containing ``a`` in every dimension."""
    a = check_actions(np.broadcast_to(np.asarray(a, dtype=np.float64), iv.low.shape), iv.low, iv.high)
    b, _ = kernels.c2f_encode(np.ascontiguousarray(a), iv.low, iv.high, 1, B)
    return b[0]


def encode_actions(spec: ActionSpaceSpec, actions) -> LevelPath:
    """Level path of actions shaped (..., dims) in one vectorized pass."""
    a = np.asarray(actions)
    if a.shape[-1] != spec.dims:
        raise ValueError(f"expected {spec.dims} action dims, got {a.shape[-1]}")
    a = check_actions(a, spec.low_array, spec.high_array)
    bins, cents = kernels.c2f_encode(a, spec.low_array.astype(a.dtype), spec.high_array.astype(a.dtype),
                                     spec.levels, spec.bins)
    return LevelPath(bins, cents)


def action_to_level_path(spec: ActionSpaceSpec, a) -> LevelPath:
    """Containing bin and centroid per level for a single action vector."""
    return encode_actions(spec, np.asarray(a, dtype=np.float64).reshape(spec.dims))


def decode(path: LevelPath):
    return path.decode()


class ActionScaler:
    """Affine map between environment actions and the agent's [-1, 1] box.

    Built from per-dimension min/max over demonstration actions; dimensions
    the demos never vary in (and the no-demo case) map through unchanged.
    """

    def __init__(self, low=None, high=None):
        self.low = None if low is None else np.asarray(low, dtype=np.float64)
        self.high = None if high is None else np.asarray(high, dtype=np.float64)

    @classmethod
    def from_demos(cls, actions):
        if actions is None or len(actions) == 0:
            return cls()
        acts = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1]) for a in actions])
        lo, hi = acts.min(axis=0), acts.max(axis=0)
        flat = hi - lo < 1e-8
        lo[flat], hi[flat] = -1.0, 1.0
        return cls(lo, hi)

    @property
    def identity(self):
        return self.low is None

    def to_agent(self, a):
        if self.identity:
            return np.asarray(a)
        a = np.asarray(a)
        out = 2.0 * (a - self.low) / (self.high - self.low) - 1.0
        return np.clip(out, -1.0, 1.0).astype(a.dtype, copy=False)

    def to_env(self, a):
        if self.identity:
            return np.asarray(a)
        a = np.asarray(a)
        return (self.low + (a + 1.0) * 0.5 * (self.high - self.low)).astype(a.dtype, copy=False)
