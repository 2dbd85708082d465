"""Small sparse-reward control tasks with analytic experts.

All tasks take actions in [-1, 1]^N, pay reward 1 on the first step that
meets the success criterion and end there, so discounted returns stay in
[0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .c2f import ControlSemantics
from .replay import Episode


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    semantics: ControlSemantics
    max_episode_length: int
    success_radius: float


# ---------------------------------------------------------------- reach2d


@dataclass(frozen=True)
class ReachState:
    pos: np.ndarray
    goal: np.ndarray
    t: int = 0


def reach2d_step(state: ReachState, action, gain=0.1, radius=0.05, max_len=50):
    """Point mass that moves by ``gain * action`` inside [-1, 1]^2.

    The action is an offset of the commanded target from the current
    position; the mass covers a ``gain`` fraction of it per step.
    Returns ``(next_state, reward, done)``.
    """
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    pos = np.clip(state.pos + gain * a, -1.0, 1.0)
    nxt = ReachState(pos, state.goal, state.t + 1)
    success = bool(np.linalg.norm(pos - state.goal) < radius)
    return nxt, float(success), success or nxt.t >= max_len


class Reach2D:
    semantics = ControlSemantics.POSITION

    def __init__(self, max_len=50, radius=0.05, gain=0.1, spread=0.6, min_dist=0.3, expert_gain=5.0):
        self.max_len, self.radius, self.gain = max_len, radius, gain
        self.spread, self.min_dist, self.expert_gain = spread, min_dist, expert_gain
        self.spec = EnvSpec("reach2d", 6, 2, self.semantics, max_len, radius)
        self.state = None
        self.success = False

    def _sample_pair(self, rng, dims):
        while True:
            pos = rng.uniform(-self.spread, self.spread, size=dims)
            goal = rng.uniform(-self.spread, self.spread, size=2)
            if np.linalg.norm(self._effector(pos) - goal) >= self.min_dist:
                return pos, goal

    def _effector(self, pos):
        return pos

    def reset(self, rng):
        pos, goal = self._sample_pair(rng, 2)
        self.state = ReachState(pos, goal, 0)
        self.success = False
        return self.observe()

    def observe(self):
        s = self.state
        return np.concatenate([s.pos, s.goal, s.goal - s.pos])

    def step(self, action):
        self.state, r, done = reach2d_step(self.state, action, self.gain, self.radius, self.max_len)
        self.success = self.success or r > 0
        return self.observe(), r, done, {"success": self.success, "terminal": r > 0}

    def expert(self):
        s = self.state
        return np.clip(self.expert_gain * (s.goal - self._effector(s.pos)), -1.0, 1.0)


class ArmReach(Reach2D):
    """Three 2-D joints whose mean is the end effector; six action dimensions."""

    def __init__(self, **kw):
        super().__init__(**kw)
        self.spec = EnvSpec("arm_reach", 10, 6, self.semantics, self.max_len, self.radius)

    def _effector(self, joints):
        return joints.reshape(3, 2).mean(axis=0)

    def reset(self, rng):
        joints, goal = self._sample_pair(rng, 6)
        self.state = ReachState(joints, goal, 0)
        self.success = False
        return self.observe()

    def observe(self):
        s = self.state
        return np.concatenate([s.pos, s.goal, s.goal - self._effector(s.pos)])

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        s = self.state
        joints = np.clip(s.pos + self.gain * a, -1.0, 1.0)
        self.state = ReachState(joints, s.goal, s.t + 1)
        hit = bool(np.linalg.norm(self._effector(joints) - s.goal) < self.radius)
        self.success = self.success or hit
        return self.observe(), float(hit), hit or self.state.t >= self.max_len, {"success": self.success,
                                                                                 "terminal": hit}

    def expert(self):
        return np.tile(super().expert(), 3)


# ---------------------------------------------------------------- pendulum


@dataclass(frozen=True)
class PendulumParams:
    dt: float = 0.05
    gravity: float = 10.0
    length: float = 1.0
    mass: float = 1.0
    damping: float = 0.05
    max_torque: float = 3.0
    tolerance: float = 0.2
    max_len: int = 200
    substeps: int = 10

    @property
    def inertia(self):
        return self.mass * self.length ** 2


@dataclass(frozen=True)
class PendulumState:
    theta: float  # 0 hangs straight down
    omega: float
    t: int = 0


def wrap_angle(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


def pendulum_torque_step(state: PendulumState, action, p: PendulumParams = PendulumParams()):
    """Damped pendulum driven by torque ``action * max_torque`` for one control period.

    The period ``dt`` is integrated with ``substeps`` semi-implicit Euler
    steps (velocity first, then angle).
    """
    u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0)) * p.max_torque
    h = p.dt / p.substeps
    theta, omega = state.theta, state.omega
    for _ in range(p.substeps):
        alpha = (u - p.mass * p.gravity * p.length * np.sin(theta) - p.damping * omega) / p.inertia
        omega = omega + h * alpha
        theta = theta + h * omega
    nxt = PendulumState(theta, omega, state.t + 1)
    up = bool(abs(wrap_angle(theta - np.pi)) < p.tolerance)
    return nxt, float(up), up or nxt.t >= p.max_len


def pendulum_energy(state: PendulumState, p: PendulumParams = PendulumParams()):
    """Mechanical energy measured from the hanging rest position."""
    return 0.5 * p.inertia * state.omega ** 2 + p.mass * p.gravity * p.length * (1 - np.cos(state.theta))


class PendulumTorque:
    semantics = ControlSemantics.TORQUE

    def __init__(self, params: PendulumParams = None, **kw):
        self.p = replace(params or PendulumParams(), **kw)
        self.spec = EnvSpec("pendulum", 3, 1, self.semantics, self.p.max_len, self.p.tolerance)
        self.state = None
        self.success = False

    def reset(self, rng):
        self.state = PendulumState(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0)
        self.success = False
        return self.observe()

    def observe(self):
        s = self.state
        return np.array([np.cos(s.theta), np.sin(s.theta), s.omega / 8.0])

    def step(self, action):
        self.state, r, done = pendulum_torque_step(self.state, action, self.p)
        self.success = self.success or r > 0
        return self.observe(), r, done, {"success": self.success, "terminal": r > 0}

    def expert(self):
        """Energy pumping towards the upright energy level."""
        s, p = self.state, self.p
        target = 2 * p.mass * p.gravity * p.length
        direction = 1.0 if s.omega >= 0 else -1.0
        return np.array([np.clip(2.0 * (target - pendulum_energy(s, p)) * direction, -1.0, 1.0)])


ENVS = {"reach2d": Reach2D, "arm_reach": ArmReach, "pendulum": PendulumTorque}


def make_env(name, **kw):
    try:
        return ENVS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


# ---------------------------------------------------------------- demos


def idle_action(last, semantics):
    """Null action: hold the last command under position control, zero torque otherwise."""
    if ControlSemantics(semantics) is ControlSemantics.TORQUE:
        return np.zeros_like(last)
    return last.copy()


def scripted_demo(env, noise, pause_prob, rng) -> Episode:
    """Roll out the env's expert with Gaussian noise and idle pauses.

    With probability ``pause_prob`` per step, a run of 1-5 idle actions
    starts.  Before the first executed action the "last" action is zero.
    """
    obs = env.reset(rng)
    N = env.spec.action_dim
    last = np.zeros(N)
    idle = 0
    rows = []
    done = False
    while not done:
        if idle == 0 and pause_prob > 0 and rng.random() < pause_prob:
            idle = int(rng.integers(1, 6))
        if idle > 0:
            a = idle_action(last, env.semantics)
            idle -= 1
        else:
            a = env.expert()
            if noise > 0:
                a = np.clip(a + rng.normal(0.0, noise, size=N), -1.0, 1.0)
        nxt, r, done, info = env.step(a)
        rows.append((obs, a, r, nxt, info["terminal"]))
        obs, last = nxt, a
    o, a, r, n, term = zip(*rows)
    return Episode(np.stack(o), np.stack(a), np.array(r), np.stack(n), np.array(term),
                   success=bool(env.success), source="scripted-demo", demo=True)
