"""Turning predicted action sequences into executed actions."""
from __future__ import annotations

import numpy as np


def ensemble_weights(ages, m):
    """``exp(-m * age)``; age 0 always weighs 1, even for infinite ``m``."""
    ages = np.asarray(ages, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        w = np.exp(-m * ages)
    return np.where(ages == 0, 1.0, w)


class EnsembleBuffer:
    """Predictions made at recent steps, averaged with exponential age weights.

    A prediction recorded at step ``t0`` covers steps ``t0 .. t0+K-1``.
    Recording again at the same ``t0`` replaces the earlier entry.
    """

    def __init__(self, K, m=0.01):
        self.K = K
        self.m = m
        self.entries: dict[int, np.ndarray] = {}

    def reset(self):
        self.entries.clear()

    def record(self, t0, seq):
        seq = np.array(seq, dtype=np.float64)
        if seq.shape[0] != self.K:
            raise ValueError(f"sequence has {seq.shape[0]} steps, expected {self.K}")
        self.entries[int(t0)] = seq
        for old in [s for s in self.entries if s <= t0 - self.K]:
            del self.entries[old]

    def covering(self, t):
        """``(ages, predictions)`` for step ``t``, newest first."""
        starts = sorted((s for s in self.entries if s <= t < s + self.K), reverse=True)
        ages = np.array([t - s for s in starts], dtype=np.int64)
        preds = np.array([self.entries[s][t - s] for s in starts])
        return ages, preds

    def ensembled_action(self, t):
        ages, preds = self.covering(t)
        if ages.size == 0:
            raise LookupError(f"no recorded prediction covers step {t}")
        w = ensemble_weights(ages, self.m)
        # offsets from the newest prediction: identical predictions come back
        # exactly, and the clamp keeps rounding inside the convex hull
        base = preds[0]
        out = base + (w @ (preds - base)) / w.sum()
        return np.clip(out, preds.min(axis=0), preds.max(axis=0))


class RecedingHorizon:
    """Predict once every K steps and play the sequence open loop."""

    def __init__(self, K):
        self.K = K
        self.t0 = None
        self.seq = None

    def reset(self):
        self.t0 = self.seq = None

    def needs_prediction(self, t):
        return t % self.K == 0

    def record(self, t0, seq):
        if t0 % self.K:
            raise ValueError(f"predictions are only recorded at multiples of K={self.K}")
        self.t0, self.seq = int(t0), np.array(seq, dtype=np.float64)

    def receding_horizon_action(self, t):
        boundary = t - t % self.K
        if self.seq is None or self.t0 != boundary:
            raise LookupError(f"no prediction recorded at step {boundary}")
        return self.seq[t % self.K].copy()


def explore(a, sigma, rng, low=-1.0, high=1.0):
    """Gaussian exploration noise with standard deviation ``sigma``, clipped to bounds."""
    a = np.asarray(a, dtype=np.float64)
    if sigma == 0:
        return a.copy()
    return np.clip(a + rng.normal(0.0, sigma, size=a.shape), low, high)
