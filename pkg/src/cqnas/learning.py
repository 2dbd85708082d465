"""Losses and target-network maintenance for the sequence critic."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import kernels
from .critic import SequenceCritic, chosen_logits


@dataclass
class TrainConfig:
    """Every knob of a training run; the harness reads these from key=value files."""

    # environment and demonstrations
    env: str = "reach2d"
    n_demos: int = 20
    demo_noise: float = 0.1
    demo_pause: float = 0.1
    demo_dir: str = ""
    action_scaling: bool = True
    # action space and critic
    K: int = 8
    levels: int = 3
    bins: int = 5
    atoms: int = 51
    v_min: float = -2.0
    v_max: float = 2.0
    hidden: int = 128
    encoder_layers: int = 1
    mlp_layers: int = 2
    dueling: bool = True
    dtype: str = "float32"
    # objective
    gamma: float = 0.99
    nstep: int = 1
    tau: float = 0.02
    target_update_interval: int = 1
    rl_loss_scale: float = 0.1
    bc_loss_scale: float = 1.0
    margin: float = 0.1
    # optimization
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.1
    utd: float = 1.0
    replay_capacity: int = 1_000_000
    # acting
    exploration_sigma: float = 0.01
    temporal_ensemble: bool = True
    ensemble_m: float = 0.01
    # schedule
    total_steps: int = 30_000
    eval_every: int = 1000
    eval_episodes: int = 25
    eval_workers: int = 1
    stop_success: float = 0.0
    time_limit_s: float = 0.0

    def validate(self):
        """Return a list of ``field: problem`` strings (empty when valid)."""
        errs = []

        def need(ok, name, msg):
            if not ok:
                errs.append(f"{name}: {msg}")

        need(0 < self.gamma <= 1, "gamma", "must be in (0, 1]")
        need(0 < self.tau <= 1, "tau", "must be in (0, 1]")
        need(self.nstep >= 1, "nstep", "must be >= 1")
        need(self.K >= 1, "K", "must be >= 1")
        need(self.levels >= 1, "levels", "must be >= 1")
        need(self.bins >= 2, "bins", "must be >= 2")
        need(self.atoms >= 2, "atoms", "must be >= 2")
        need(self.v_min < self.v_max, "v_min", "must be below v_max")
        need(self.rl_loss_scale >= 0, "rl_loss_scale", "must be >= 0")
        need(self.bc_loss_scale >= 0, "bc_loss_scale", "must be >= 0")
        need(self.margin >= 0, "margin", "must be >= 0")
        need(self.target_update_interval >= 1, "target_update_interval", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.utd > 0, "utd", "must be > 0")
        need(self.hidden >= 2, "hidden", "must be >= 2")
        need(self.mlp_layers >= 1, "mlp_layers", "must be >= 1")
        need(self.encoder_layers >= 0, "encoder_layers", "must be >= 0")
        need(self.exploration_sigma >= 0, "exploration_sigma", "must be >= 0")
        need(self.ensemble_m >= 0, "ensemble_m", "must be >= 0")
        need(self.total_steps >= 1, "total_steps", "must be >= 1")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        need(self.eval_workers >= 1, "eval_workers", "must be >= 1")
        need(self.n_demos >= 0, "n_demos", "must be >= 0")
        need(self.demo_noise >= 0, "demo_noise", "must be >= 0")
        need(0 <= self.demo_pause <= 1, "demo_pause", "must be in [0, 1]")
        need(self.replay_capacity >= 1, "replay_capacity", "must be >= 1")
        need(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        need(self.time_limit_s >= 0, "time_limit_s", "must be >= 0")
        return errs

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


@dataclass
class SampleBatch:
    """Stacked sequence samples; arrays are owned copies."""

    obs: np.ndarray          # (M, obs_dim)
    actions: np.ndarray      # (M, K, N) executed actions, padded
    rewards: np.ndarray      # (M, nstep) zero past the episode end
    returns: np.ndarray      # (M,) discounted n-step reward sum
    discount: np.ndarray     # (M,) bootstrap discount, 0 after termination
    next_obs: np.ndarray     # (M, obs_dim) observation the bootstrap reads
    demo: np.ndarray         # (M,) bool
    pad_mask: np.ndarray     # (M, K) bool, True where actions were synthesized

    def __len__(self):
        return self.obs.shape[0]


def nstep_return(rewards, gamma, terminal_index=None):
    """Discounted reward sum and bootstrap discount of an n-step window.

    ``terminal_index`` is the 0-based position of the terminating reward
    within ``rewards``, if any.
    """
    r = np.asarray(rewards, dtype=np.float64)
    n = r.shape[0]
    R = float(np.sum(r * gamma ** np.arange(n)))
    if terminal_index is not None:
        return R, 0.0
    return R, float(gamma ** n)


def categorical_projection(target_probs, R, discount, v_min, v_max):
    """Project ``R + discount * z`` onto the atom grid (last axis of ``target_probs``)."""
    p = np.asarray(target_probs)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    return kernels.categorical_projection(p, R, discount, v_min, v_max)


def target_distributions(online: SequenceCritic, target: SequenceCritic, batch: SampleBatch):
    """Projected target distributions per level, each (M, K, N, A).

    The next-state level path comes from the online critic's greedy
    inference; each level is then evaluated by the target critic under that
    path's previous-level conditioning, taking the bin with the highest
    expected value.
    """
    cfg = online.cfg
    dt = online.dtype
    R = np.asarray(batch.returns, dtype=dt)[:, None, None]
    disc = np.asarray(batch.discount, dtype=dt)[:, None, None]
    out = []
    with ad.no_grad():
        _, path = online.greedy_sequence(online.encode_observation(batch.next_obs))
        h_t = target.encode_observation(batch.next_obs)
        for l in range(cfg.action.levels):
            logits = target.level_forward(l, h_t, path.previous(l))
            probs = ad.softmax(logits).data
            q = probs @ target.atoms
            # target network's own best bin under the online path's conditioning
            best = np.argmax(q, axis=-1)[..., None, None]
            p_star = np.take_along_axis(probs, best, axis=-2)[..., 0, :]
            out.append(kernels.categorical_projection(np.ascontiguousarray(p_star), R, disc, cfg.v_min, cfg.v_max))
    return out


def td_loss_from_logits(level_logits, bins, targets):
    """Cross-entropy of online chosen-bin logits against targets.

    Summed over levels, steps and dims, averaged over the batch.
    """
    total = None
    for l, logits in enumerate(level_logits):
        ce = ad.softmax_cross_entropy(chosen_logits(logits, bins[l]), targets[l], check=False)
        s = ad.sum(ce)
        total = s if total is None else total + s
    return ad.scale(total, 1.0 / level_logits[0].shape[0])


def margin_bc_loss(qvalues, expert_bins, margin, demo_mask=None):
    """Large-margin loss over per-level expected values (..., B).

    ``qvalues`` is a list of Tensors (M, K, N, B), one per level, and
    ``expert_bins`` the matching (L, M, K, N) bin indices.  The loss is summed
    over levels, steps and dims and averaged over demo-flagged samples.
    """
    M = qvalues[0].shape[0]
    mask = np.ones(M, dtype=bool) if demo_mask is None else np.asarray(demo_mask, dtype=bool)
    n_demo = int(mask.sum())
    if n_demo == 0:
        return ad.Tensor(np.zeros((), dtype=qvalues[0].dtype))
    weight = ad.Tensor((mask / n_demo).astype(qvalues[0].dtype))
    total = None
    for l, q in enumerate(qvalues):
        per = ad.sum(ad.sum(ad.margin_loss(q, expert_bins[l], margin), axis=-1), axis=-1)  # (M,)
        s = ad.sum(per * weight)
        total = s if total is None else total + s
    return total


@dataclass
class LossInfo:
    total: float
    td: float
    bc: float


def critic_loss(online: SequenceCritic, target: SequenceCritic, batch: SampleBatch, cfg: TrainConfig):
    """Total loss ``rl_scale * TD + bc_scale * BC`` and its parts.

    Both terms share one online forward pass over the stored sequences.
    """
    h = online.encode_observation(batch.obs)
    level_logits, path = online.q_of_sequence(h, batch.actions)
    terms = []
    td = bc = None
    if cfg.rl_loss_scale > 0:
        targets = target_distributions(online, target, batch)
        td = td_loss_from_logits(level_logits, path.bins, targets)
        terms.append(ad.scale(td, cfg.rl_loss_scale))
    if cfg.bc_loss_scale > 0:
        qs = [online.expected_q(lg) for lg in level_logits]
        bc = margin_bc_loss(qs, path.bins, cfg.margin, batch.demo)
        terms.append(ad.scale(bc, cfg.bc_loss_scale))
    if not terms:
        raise ValueError("both loss scales are zero")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    info = LossInfo(float(total.data),
                    float(td.data) if td is not None else 0.0,
                    float(bc.data) if bc is not None else 0.0)
    return total, info


def td_loss(batch: SampleBatch, online: SequenceCritic, target: SequenceCritic) -> ad.Tensor:
    h = online.encode_observation(batch.obs)
    level_logits, path = online.q_of_sequence(h, batch.actions)
    return td_loss_from_logits(level_logits, path.bins, target_distributions(online, target, batch))


def soft_update(target: SequenceCritic, online: SequenceCritic, tau: float):
    """Polyak averaging ``target <- (1 - tau) * target + tau * online``; tau=1 copies."""
    if len(target.params) != len(online.params):
        raise ValueError("target and online critics have different parameter sets")
    for pt, po in zip(target.params, online.params):
        if pt.data.shape != po.data.shape:
            raise ValueError(f"{pt.name}: shape {pt.data.shape} != {po.data.shape}")
        if tau == 1:
            pt.data[...] = po.data
        elif tau != 0:
            pt.data *= pt.data.dtype.type(1 - tau)
            pt.data += pt.data.dtype.type(tau) * po.data

