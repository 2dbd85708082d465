"""Online and demonstration replay with sequence sampling.

Transitions are grouped by episode.  An episode becomes sampleable once it is
finalized; the K-step action window and the n-step reward window of a sample
never cross its episode's end.  Steps past the end are filled with null
actions: the last executed action under position control, zeros under torque
control.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .c2f import ControlSemantics
from .learning import SampleBatch


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool = False
    demo: bool = False


@dataclass
class Episode:
    obs: np.ndarray         # (T, obs_dim)
    actions: np.ndarray     # (T, N) executed actions
    rewards: np.ndarray     # (T,)
    next_obs: np.ndarray    # (T, obs_dim)
    terminals: np.ndarray   # (T,) bool
    success: bool = False
    source: str = "online"
    demo: bool = False

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_obs = np.asarray(self.next_obs, dtype=np.float64)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        T = self.rewards.shape[0]
        if not (self.obs.shape[0] == self.actions.shape[0] == self.next_obs.shape[0] == self.terminals.shape[0] == T):
            raise ValueError("episode arrays disagree on length")
        if T == 0:
            raise ValueError("empty episode")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward")

    def __len__(self):
        return self.rewards.shape[0]

    @classmethod
    def from_transitions(cls, transitions, success=False, source="online"):
        ts = list(transitions)
        if not ts:
            raise ValueError("empty episode")
        return cls(np.stack([t.obs for t in ts]), np.stack([t.action for t in ts]),
                   np.array([t.reward for t in ts]), np.stack([t.next_obs for t in ts]),
                   np.array([t.terminal for t in ts]), success=success, source=source,
                   demo=bool(ts[0].demo))

    def transition(self, t):
        return Transition(self.obs[t].copy(), self.actions[t].copy(), float(self.rewards[t]),
                          self.next_obs[t].copy(), bool(self.terminals[t]), self.demo)

    def relabeled(self, demo: bool) -> "Episode":
        return Episode(self.obs.copy(), self.actions.copy(), self.rewards.copy(), self.next_obs.copy(),
                       self.terminals.copy(), self.success, self.source, demo)


class EpisodeBuffer:
    """Finalized episodes in insertion order with a flat index for sampling."""

    def __init__(self, capacity=None, demo=False):
        self.capacity = capacity
        self.demo = demo
        self.episodes: OrderedDict = OrderedDict()
        self.pending: dict = {}
        self.lock = threading.Lock()
        self._size = 0
        self._flat = None

    def __len__(self):
        return self._size

    def add(self, ep_id, episode: Episode):
        with self.lock:
            if ep_id in self.episodes:
                raise ValueError(f"episode {ep_id!r} already stored")
            self.episodes[ep_id] = episode
            self._size += len(episode)
            if self.capacity is not None:
                # whole episodes go, oldest first, but never the newest one
                while self._size > self.capacity and len(self.episodes) > 1:
                    _, old = self.episodes.popitem(last=False)
                    self._size -= len(old)
            self._flat = None

    def _index(self):
        if self._flat is None:
            eps = list(self.episodes.values())
            lengths = np.array([len(e) for e in eps], dtype=np.int64)
            ends = np.cumsum(lengths)
            self._flat = dict(
                obs=np.concatenate([e.obs for e in eps]),
                actions=np.concatenate([e.actions for e in eps]),
                rewards=np.concatenate([e.rewards for e in eps]),
                next_obs=np.concatenate([e.next_obs for e in eps]),
                terminals=np.concatenate([e.terminals for e in eps]),
                end=np.repeat(ends, lengths),
                start={k: int(s) for k, s in zip(self.episodes.keys(), ends - lengths)},
            )
        return self._flat

    def gather(self, rows, K, nstep, gamma, semantics) -> SampleBatch:
        with self.lock:
            return _gather(self._index(), np.asarray(rows, dtype=np.int64), K, nstep, gamma, semantics, self.demo)

    def row_of(self, ep_id, t):
        with self.lock:
            if ep_id not in self.episodes:
                raise KeyError(f"unknown episode {ep_id!r}")
            if not 0 <= t < len(self.episodes[ep_id]):
                raise IndexError(f"step {t} outside episode {ep_id!r}")
            return self._index()["start"][ep_id] + t


def _gather(flat, rows, K, nstep, gamma, semantics, demo) -> SampleBatch:
    end = flat["end"][rows][:, None]
    ks = rows[:, None] + np.arange(K)
    valid = ks < end
    # clamping to the last step repeats the final action, the position-control null action
    acts = flat["actions"][np.minimum(ks, end - 1)]
    if ControlSemantics(semantics) is ControlSemantics.TORQUE:
        acts[~valid] = 0.0
    ns = rows[:, None] + np.arange(nstep)
    nvalid = ns < end
    nidx = np.minimum(ns, end - 1)
    rewards = np.where(nvalid, flat["rewards"][nidx], 0.0)
    terminated = np.any(flat["terminals"][nidx] & nvalid, axis=1)
    count = nvalid.sum(axis=1)
    R = rewards @ (gamma ** np.arange(nstep, dtype=np.float64))
    discount = np.where(terminated, 0.0, np.float64(gamma) ** count)
    return SampleBatch(
        obs=flat["obs"][rows],
        actions=acts,
        rewards=rewards,
        returns=R,
        discount=discount,
        next_obs=flat["next_obs"][rows + count - 1],
        demo=np.full(rows.shape[0], demo),
        pad_mask=~valid,
    )


def concat_batches(batches) -> SampleBatch:
    return SampleBatch(*(np.concatenate([getattr(b, f) for b in batches])
                         for f in SampleBatch.__dataclass_fields__))


class ReplayStore:
    """Online buffer (bounded, episode-granular eviction) plus demo buffer (unbounded)."""

    def __init__(self, K=8, nstep=1, gamma=0.99, semantics=ControlSemantics.POSITION, capacity=1_000_000):
        self.K, self.nstep, self.gamma = K, nstep, gamma
        self.semantics = ControlSemantics(semantics)
        self.online = EpisodeBuffer(capacity, demo=False)
        self.demo = EpisodeBuffer(None, demo=True)
        self._pending: dict = {}
        self._lock = threading.Lock()

    # ------------------------------------------------------------ writing

    def append(self, t: Transition, episode_id):
        """Add a step to an in-progress episode.

        Demo-flagged episodes are routed to the demo buffer, others to the
        online buffer; they become sampleable on :meth:`finalize_episode`.
        """
        with self._lock:
            if episode_id not in self._pending:
                buf = self.demo if t.demo else self.online
                self._pending[episode_id] = (buf, [])
                buf.pending[episode_id] = True
            self._pending[episode_id][1].append(Transition(
                np.array(t.obs, dtype=np.float64), np.array(t.action, dtype=np.float64), float(t.reward),
                np.array(t.next_obs, dtype=np.float64), bool(t.terminal), bool(t.demo)))

    def finalize_episode(self, episode_id, success: bool):
        """Close an episode.

        Online successes are also copied into the demo buffer with the demo
        flag set; failed demonstrations are moved to the online buffer
        without it.
        """
        with self._lock:
            if episode_id not in self._pending:
                raise KeyError(f"unknown episode {episode_id!r}")
            buf, steps = self._pending.pop(episode_id)
            buf.pending.pop(episode_id, None)
        source = "scripted-demo" if buf is self.demo else "online"
        ep = Episode.from_transitions(steps, success=bool(success), source=source)
        if buf is self.demo:
            if success:
                self.demo.add(episode_id, ep.relabeled(True))
            else:
                self.online.add(episode_id, ep.relabeled(False))
        else:
            self.online.add(episode_id, ep.relabeled(False))
            if success:
                self.demo.add(episode_id, ep.relabeled(True))

    def add_episode(self, episode: Episode, episode_id, demo=None):
        """Append every step of ``episode`` and finalize it with its success flag."""
        flag = episode.demo if demo is None else demo
        for t in range(len(episode)):
            tr = episode.transition(t)
            tr.demo = flag
            self.append(tr, episode_id)
        self.finalize_episode(episode_id, episode.success)

    # ------------------------------------------------------------ reading

    def get(self, episode_id, t) -> Transition:
        with self._lock:
            if episode_id in self._pending:
                return self._pending[episode_id][1][t]
        for buf in (self.online, self.demo):
            if episode_id in buf.episodes:
                return buf.episodes[episode_id].transition(t)
        raise KeyError(f"unknown episode {episode_id!r}")

    def make_sequence_sample(self, episode_id, t, K=None, nstep=None, semantics=None, buffer=None) -> SampleBatch:
        """One sequence sample (a batch of size 1) starting at step ``t``."""
        buf = buffer or (self.online if episode_id in self.online.episodes else self.demo)
        row = buf.row_of(episode_id, t)
        return buf.gather([row], K or self.K, nstep or self.nstep, self.gamma, semantics or self.semantics)

    def sample_mixed_batch(self, size, rng) -> SampleBatch:
        """``ceil(size/2)`` demo and ``floor(size/2)`` online samples.

        If one buffer is empty the other supplies the whole batch.
        """
        nd, no = len(self.demo), len(self.online)
        if nd == 0 and no == 0:
            raise ValueError("cannot sample: both replay buffers are empty")
        if nd and no:
            n_demo = math.ceil(size / 2)
        else:
            n_demo = size if nd else 0
        parts = []
        if n_demo:
            parts.append(self.demo.gather(rng.integers(0, nd, n_demo), self.K, self.nstep, self.gamma, self.semantics))
        if size - n_demo:
            parts.append(self.online.gather(rng.integers(0, no, size - n_demo), self.K, self.nstep, self.gamma,
                                            self.semantics))
        return parts[0] if len(parts) == 1 else concat_batches(parts)


# ---------------------------------------------------------------- demo files

DEMO_MAGIC = "cqnas-episode 1"


def save_episode(path, episode: Episode, semantics):
    """Write one episode: a text header, a blank line, then float32 rows.

    Each row is ``(obs, action, reward)``; the final next-observation and
    the success/terminal flags travel in the header.
    """
    T, od = episode.obs.shape
    N = episode.actions.shape[1]
    final = " ".join(repr(float(v)) for v in episode.next_obs[-1].astype(np.float32))
    header = [DEMO_MAGIC, f"obs_dim {od}", f"action_dim {N}", f"semantics {ControlSemantics(semantics).value}",
              f"length {T}", f"success {int(episode.success)}", f"terminal {int(episode.terminals[-1])}",
              f"source {episode.source}", f"final_obs {final}"]
    rows = np.concatenate([episode.obs, episode.actions, episode.rewards[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("ascii"))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_episode(path):
    """Inverse of :func:`save_episode`; returns ``(episode, semantics)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: header not terminated")
    lines = raw[:end].decode("ascii").splitlines()
    if not lines or lines[0] != DEMO_MAGIC:
        raise ValueError(f"{path}: not an episode file")
    meta = {}
    for line in lines[1:]:
        key, _, val = line.partition(" ")
        meta[key] = val
    od, N, T = int(meta["obs_dim"]), int(meta["action_dim"]), int(meta["length"])
    data = np.frombuffer(raw, dtype="<f4", offset=end + 2)
    if data.size != T * (od + N + 1):
        raise ValueError(f"{path}: payload has {data.size} floats, header implies {T * (od + N + 1)}")
    rows = data.reshape(T, od + N + 1).astype(np.float64)
    obs = rows[:, :od]
    final = np.array([float(v) for v in meta["final_obs"].split()], dtype=np.float64)
    next_obs = np.concatenate([obs[1:], final[None]], axis=0)
    terminals = np.zeros(T, dtype=bool)
    terminals[-1] = bool(int(meta.get("terminal", "0")))
    ep = Episode(obs, rows[:, od:od + N], rows[:, -1], next_obs, terminals,
                 success=bool(int(meta.get("success", "0"))), source=meta.get("source", "scripted-demo"))
    return ep, ControlSemantics(meta["semantics"])
