"""The action-sequence critic.

For each level ``l`` the critic builds K step features
``[h, a^{l-1}_{k}, e_k]``, runs them through a shared MLP and a unidirectional
GRU, and projects each GRU state to categorical value logits for every action
dimension and bin.  Every level has its own parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .c2f import ActionSpaceSpec, LevelPath, encode_actions, zoom_bounds


@dataclass(frozen=True)
class CriticConfig:
    obs_dim: int
    action: ActionSpaceSpec
    K: int = 8
    hidden: int = 128
    encoder_layers: int = 1
    mlp_layers: int = 2
    atoms: int = 51
    v_min: float = -2.0
    v_max: float = 2.0
    dueling: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.K < 1 or self.hidden < 2 or self.atoms < 2 or self.mlp_layers < 1:
            raise ValueError("critic needs K >= 1, hidden >= 2, atoms >= 2 and at least one MLP layer")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ValueError("critic dtype must be float32 or float64")

    @property
    def feature_dim(self):
        return self.hidden if self.encoder_layers else self.obs_dim

    @property
    def step_dim(self):
        return self.feature_dim + self.action.dims + self.K


class _Level:
    __slots__ = ("mlp", "W_ih", "W_hh", "b_ih", "b_hh", "adv", "val")


class SequenceCritic:
    def __init__(self, cfg: CriticConfig, rng=None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(rng)
        dt, H = self.dtype, cfg.hidden
        N, B, A = cfg.action.dims, cfg.action.bins, cfg.atoms
        self.params: list[Param] = []

        def param(name, data):
            p = Param(np.asarray(data, dtype=dt), name)
            self.params.append(p)
            return p

        self.encoder = []
        d = cfg.obs_dim + 1  # constant input column, see encode_observation
        for i in range(cfg.encoder_layers):
            self.encoder.append(param(f"encoder.{i}.W", ad.uniform_fan_in(rng, H, d)))
            d = H
        self.levels = []
        for l in range(cfg.action.levels):
            lv = _Level()
            lv.mlp = []
            d = cfg.step_dim
            for i in range(cfg.mlp_layers):
                lv.mlp.append(param(f"level{l}.mlp.{i}.W", ad.uniform_fan_in(rng, H, d)))
                d = H
            bound = 1.0 / np.sqrt(H)
            lv.W_ih = param(f"level{l}.gru.W_ih", rng.uniform(-bound, bound, size=(3 * H, H)))
            lv.W_hh = param(f"level{l}.gru.W_hh", np.concatenate([ad.orthogonal(rng, H) for _ in range(3)]))
            lv.b_ih = param(f"level{l}.gru.b_ih", np.zeros(3 * H))
            lv.b_hh = param(f"level{l}.gru.b_hh", np.zeros(3 * H))
            lv.adv = param(f"level{l}.adv.W", ad.uniform_fan_in(rng, N * B * A, H))
            lv.val = param(f"level{l}.val.W", ad.uniform_fan_in(rng, N * A, H)) if cfg.dueling else None
            self.levels.append(lv)
        self.atoms = np.linspace(cfg.v_min, cfg.v_max, A).astype(dt)
        self._onehot = np.eye(cfg.K, dtype=dt)

    # ------------------------------------------------------------ parameters

    def state_dict(self):
        return {p.name: p.data for p in self.params}

    def load_state_dict(self, state):
        names = {p.name for p in self.params}
        if set(state) != names:
            raise ValueError(f"state mismatch: missing {sorted(names - set(state))}, extra {sorted(set(state) - names)}")
        for p in self.params:
            src = np.asarray(state[p.name])
            if src.shape != p.data.shape:
                raise ValueError(f"{p.name}: shape {src.shape} != {p.data.shape}")
            p.data[...] = src

    def copy(self) -> "SequenceCritic":
        """Deep copy of the parameters (optimizer state is not copied)."""
        other = SequenceCritic.__new__(SequenceCritic)
        other.cfg, other.dtype, other.atoms, other._onehot = self.cfg, self.dtype, self.atoms, self._onehot
        lookup = {}
        other.params = []
        for p in self.params:
            q = Param(p.data.copy(), p.name)
            lookup[id(p)] = q
            other.params.append(q)
        other.encoder = [lookup[id(W)] for W in self.encoder]
        other.levels = []
        for lv in self.levels:
            nv = _Level()
            nv.mlp = [lookup[id(W)] for W in lv.mlp]
            for name in ("W_ih", "W_hh", "b_ih", "b_hh", "adv", "val"):
                p = getattr(lv, name)
                setattr(nv, name, None if p is None else lookup[id(p)])
            other.levels.append(nv)
        return other

    def save(self, path):
        ad.save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(ad.load_checkpoint(path))

    # ------------------------------------------------------------ forward

    def encode_observation(self, obs) -> Tensor:
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"expected observations of size {self.cfg.obs_dim}, got {obs.shape[-1]}")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observation contains NaN or Inf")
        if not self.encoder:
            return Tensor(obs)
        # A constant 1 joins the input: LayerNorm after a bias-free linear is
        # blind to the overall scale of its input, and obs and 2*obs are
        # different states here.
        x = Tensor(np.concatenate([obs, np.ones(obs.shape[:-1] + (1,), self.dtype)], axis=-1))
        for W in self.encoder:
            x = ad.silu_layernorm(ad.linear(x, W))
        return x

    def step_features(self, h, prev_seq) -> Tensor:
        """Step inputs ``[h, prev-level action of step k, e_k]`` shaped (..., K, step_dim)."""
        h = ad.as_tensor(h)
        K, lead = self.cfg.K, h.shape[:-1]
        hk = ad.broadcast_to(ad.reshape(h, lead + (1, h.shape[-1])), lead + (K, h.shape[-1]))
        prev = Tensor(np.broadcast_to(np.asarray(prev_seq, dtype=self.dtype), lead + (K, self.cfg.action.dims)))
        onehot = Tensor(np.broadcast_to(self._onehot, lead + (K, K)))
        return ad.concat([hk, prev, onehot], axis=-1)

    def level_forward(self, level, h, prev_seq) -> Tensor:
        """Value logits of one level, shaped (..., K, N, B, A)."""
        cfg = self.cfg
        N, B, A = cfg.action.dims, cfg.action.bins, cfg.atoms
        prev_seq = np.asarray(prev_seq)
        if prev_seq.ndim < 2 or prev_seq.shape[-2:] != (cfg.K, N):
            raise ValueError(f"previous-level sequence must end in ({cfg.K}, {N}), got {prev_seq.shape}")
        h = ad.as_tensor(h)
        lead = h.shape[:-1]
        lv = self.levels[level]
        x = self.step_features(h, prev_seq)
        for W in lv.mlp:
            x = ad.silu_layernorm(ad.linear(x, W))
        s = ad.gru(x, lv.W_ih, lv.W_hh, lv.b_ih, lv.b_hh)
        adv = ad.reshape(ad.linear(s, lv.adv), lead + (cfg.K, N, B, A))
        if lv.val is None:
            return adv
        val = ad.reshape(ad.linear(s, lv.val), lead + (cfg.K, N, 1, A))
        return ad.dueling(val, adv, axis=-2)

    def expected_q(self, logits: Tensor) -> Tensor:
        """Expected value of the atom distribution over the last axis."""
        return ad.expectation(logits, self.atoms)

    def greedy_sequence(self, h):
        """Coarse-to-fine greedy action sequence for features ``h`` (..., D).

        Returns ``(actions (..., K, N), LevelPath)``; the path also records
        each level's expected bin values in ``qvalues``.
        """
        cfg, dt = self.cfg, self.dtype
        spec = cfg.action
        h = ad.as_tensor(h)
        shape = h.shape[:-1] + (cfg.K, spec.dims)
        lo = np.broadcast_to(spec.low_array.astype(dt), shape).copy()
        hi = np.broadcast_to(spec.high_array.astype(dt), shape).copy()
        prev = np.zeros(shape, dtype=dt)
        bins = np.empty((spec.levels,) + shape, dtype=np.int64)
        cents = np.empty((spec.levels,) + shape, dtype=dt)
        qs = np.empty((spec.levels,) + shape + (spec.bins,), dtype=dt)
        half = dt.type(0.5)
        with ad.no_grad():
            for l in range(spec.levels):
                q = self.expected_q(self.level_forward(l, h, prev)).data
                b = np.argmax(q, axis=-1)  # first maximum wins ties
                lo, hi = zoom_bounds(lo, hi, b, spec.bins)
                prev = half * (lo + hi)
                bins[l], cents[l], qs[l] = b, prev, q
        return cents[-1].copy(), LevelPath(bins, cents, qs)

    def q_of_sequence(self, h, seq):
        """Logits of every level along the zoom path of ``seq`` (..., K, N).

        Returns ``(level_logits, path)`` where ``level_logits[l]`` is the full
        (..., K, N, B, A) output of level ``l`` conditioned on the path's own
        previous-level centroids; use :func:`chosen_logits` to pick bins.
        """
        seq = np.asarray(seq, dtype=self.dtype)
        path = encode_actions(self.cfg.action, seq)
        logits = [self.level_forward(l, h, path.previous(l)) for l in range(self.cfg.action.levels)]
        return logits, path

    def act(self, obs):
        """Greedy action sequence for raw observations, without recording a graph."""
        with ad.no_grad():
            return self.greedy_sequence(self.encode_observation(obs))[0]


def chosen_logits(logits: Tensor, bins) -> Tensor:
    """Pick bin ``bins[...]`` from logits (..., B, A) -> (..., A)."""
    idx = np.asarray(bins, dtype=np.int64)[..., None, None]
    picked = ad.take_along(logits, idx, axis=-2)
    return ad.reshape(picked, picked.shape[:-2] + (picked.shape[-1],))
