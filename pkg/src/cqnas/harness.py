"""Training loop, evaluation, experiments and artifact emission."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import threading
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .c2f import ActionScaler, ActionSpaceSpec, ControlSemantics
from .critic import CriticConfig, SequenceCritic
from .envs import PendulumState, make_env, pendulum_torque_step, scripted_demo
from .executor import EnsembleBuffer, RecedingHorizon, explore
from .learning import TrainConfig, critic_loss, soft_update
from .replay import ReplayStore, Transition, load_episode

OUTPUT_ENV = "CQNAS_OUTPUT_DIR"
CSV_HEADER = ["step", "success_rate", "td_loss", "bc_loss", "wall_s"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending fields."""


class TrainingDiverged(RuntimeError):
    """A loss or parameter became NaN or infinite."""


def output_dir(default="runs"):
    return Path(os.environ.get(OUTPUT_ENV) or default)


# ---------------------------------------------------------------- config


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name, typ, raw):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def make_config(values=None, base: TrainConfig = None) -> TrainConfig:
    """Build a validated config from a ``{key: value}`` mapping of overrides."""
    types = TrainConfig.field_types()
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    unknown = sorted(k for k in (values or {}) if k not in types)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in (values or {}).items():
        setattr(cfg, k, _convert(k, types[k], v))
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None) -> TrainConfig:
    values = {}
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e}") from None
    values.update(overrides or {})
    return make_config(values)


def config_to_text(cfg: TrainConfig):
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


def config_hash(cfg: TrainConfig):
    return hashlib.sha256(json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- run log


@dataclass
class RunRow:
    step: int
    success_rate: float
    td_loss: float
    bc_loss: float
    wall_s: float


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, row: RunRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("run log steps must strictly increase")
        vals = dataclasses.astuple(row)
        if not all(math.isfinite(v) for v in vals):
            raise TrainingDiverged(f"non-finite value in run log row {row}")
        self.rows.append(row)

    def deterministic_rows(self):
        """Rows without the wall-clock column, for reproducibility checks."""
        return [(r.step, r.success_rate, r.td_loss, r.bc_loss) for r in self.rows]

    @property
    def final_success(self):
        return self.rows[-1].success_rate if self.rows else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.step] + [repr(float(v)) for v in (r.success_rate, r.td_loss, r.bc_loss, r.wall_s)])

    @classmethod
    def from_csv(cls, path, meta=None):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            log = cls(meta=dict(meta or {}))
            for rec in rd:
                log.rows.append(RunRow(int(rec[0]), *(float(v) for v in rec[1:])))
        return log


# ---------------------------------------------------------------- agent pieces


def action_spec_for(cfg: TrainConfig, env) -> ActionSpaceSpec:
    return ActionSpaceSpec(env.spec.action_dim, cfg.levels, cfg.bins, semantics=env.semantics)


def build_critic(cfg: TrainConfig, env, rng) -> SequenceCritic:
    ccfg = CriticConfig(obs_dim=env.spec.obs_dim, action=action_spec_for(cfg, env), K=cfg.K, hidden=cfg.hidden,
                        encoder_layers=cfg.encoder_layers, mlp_layers=cfg.mlp_layers, atoms=cfg.atoms,
                        v_min=cfg.v_min, v_max=cfg.v_max, dueling=cfg.dueling, dtype=cfg.dtype)
    return SequenceCritic(ccfg, rng)


def critic_policy(critic: SequenceCritic):
    """Batched policy: observations (n, obs_dim) -> sequences (n, K, N)."""
    return lambda obs: critic.act(obs)


def expert_policy(env_name, K, expert_gain=5.0):
    """Analytic expert as a sequence policy.

    The expert's closed loop is unrolled K steps through the task dynamics
    from each observation, so the sequence is the expert's own open-loop plan.
    """

    def policy(obs):
        obs = np.asarray(obs, dtype=np.float64)
        if env_name in ("reach2d", "arm_reach"):
            gain = make_env(env_name).gain
            offset = obs[:, -2:].copy()
            seq = []
            for _ in range(K):
                a = np.clip(expert_gain * offset, -1.0, 1.0)
                seq.append(np.tile(a, 3) if env_name == "arm_reach" else a)
                offset -= gain * a
            return np.stack(seq, axis=1)
        if env_name == "pendulum":
            env = make_env("pendulum")
            out = np.empty((len(obs), K, 1))
            for i, o in enumerate(obs):
                env.state = PendulumState(float(np.arctan2(o[1], o[0])), float(o[2] * 8.0), 0)
                for k in range(K):
                    out[i, k] = env.expert()
                    env.state = pendulum_torque_step(env.state, out[i, k], env.p)[0]
            return out
        raise ValueError(f"no expert for {env_name!r}")

    return policy


def random_policy(action_dim, K, seed=0):
    rng = np.random.default_rng(seed)
    lock = threading.Lock()

    def policy(obs):
        with lock:
            return rng.uniform(-1.0, 1.0, size=(len(obs), K, action_dim))

    return policy


class Actor:
    """Executes sequence predictions for one environment via ensemble or receding horizon."""

    def __init__(self, K, temporal_ensemble=True, m=0.01):
        self.temporal_ensemble = temporal_ensemble
        self.buf = EnsembleBuffer(K, m) if temporal_ensemble else RecedingHorizon(K)

    def reset(self):
        self.buf.reset()

    def needs_prediction(self, t):
        return self.temporal_ensemble or self.buf.needs_prediction(t)

    def act(self, t, seq=None):
        if seq is not None:
            self.buf.record(t, seq)
        if self.temporal_ensemble:
            return self.buf.ensembled_action(t)
        return self.buf.receding_horizon_action(t)


# ---------------------------------------------------------------- evaluation


def _eval_chunk(policy, env_name, env_kwargs, seeds, K, temporal_ensemble, m, scaler):
    envs = [make_env(env_name, **env_kwargs) for _ in seeds]
    actors = [Actor(K, temporal_ensemble, m) for _ in seeds]
    obs = [env.reset(np.random.default_rng(s)) for env, s in zip(envs, seeds)]
    active = list(range(len(envs)))
    t = 0
    while active:
        need = [i for i in active if actors[i].needs_prediction(t)]
        seqs = {}
        if need:
            pred = policy(np.stack([obs[i] for i in need]))
            seqs = {i: pred[j] for j, i in enumerate(need)}
        still = []
        for i in active:
            a = actors[i].act(t, seqs.get(i))
            obs[i], _, done, _ = envs[i].step(scaler.to_env(a))
            if not done:
                still.append(i)
        active = still
        t += 1
    return [env.success for env in envs]


def evaluate(policy, env_name, episodes, seed=0, K=8, temporal_ensemble=True, m=0.01, workers=1,
             scaler=None, env_kwargs=None):
    """Mean success over ``episodes`` seeded episodes without exploration noise.

    Episodes run in lockstep so the policy sees batched observations; with
    ``workers > 1`` disjoint episode chunks run on threads.  Episode ``i``
    always uses the same seed, so results do not depend on ``workers``
    beyond floating-point batching effects.
    """
    if episodes < 1:
        raise ValueError("evaluate needs at least one episode")
    scaler = scaler or ActionScaler()
    seeds = [[seed, i] for i in range(episodes)]
    chunks = [seeds[w::workers] for w in range(workers) if seeds[w::workers]]
    args = (env_name, env_kwargs or {})
    if len(chunks) == 1:
        results = [_eval_chunk(policy, *args, chunks[0], K, temporal_ensemble, m, scaler)]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            results = list(pool.map(lambda c: _eval_chunk(policy, *args, c, K, temporal_ensemble, m, scaler),
                                    chunks))
    return float(np.mean([s for r in results for s in r]))


# ---------------------------------------------------------------- training


def generate_demos(cfg: TrainConfig, rng, env_name=None):
    env = make_env(env_name or cfg.env)
    return [scripted_demo(env, cfg.demo_noise, cfg.demo_pause, rng) for _ in range(cfg.n_demos)]


def load_demos(directory):
    paths = sorted(Path(directory).glob("*.ep"))
    if not paths:
        raise ConfigError(f"demo_dir: no .ep files in {directory}")
    return [load_episode(p)[0] for p in paths]


def _check_finite(critic, loss):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    for p in critic.params:
        if not np.all(np.isfinite(p.data)):
            raise TrainingDiverged(f"parameter {p.name} became non-finite")


def run_training(cfg: TrainConfig, seed=0, progress=None, checkpoint=None) -> RunLog:
    """Demo-driven online training; returns one row per evaluation point.

    ``progress`` is called with each new row.  ``checkpoint`` (a path)
    receives the final critic parameters and action scaler.
    """
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    t_start = time.perf_counter()
    ss = np.random.SeedSequence(seed)
    init_rng, demo_rng, env_rng, act_rng, sample_rng, eval_ss = (np.random.default_rng(s) for s in ss.spawn(6))
    eval_seed = int(eval_ss.integers(2 ** 31))
    env = make_env(cfg.env)
    demos = load_demos(cfg.demo_dir) if cfg.demo_dir else generate_demos(cfg, demo_rng)
    scaler = ActionScaler.from_demos([d.actions for d in demos]) if cfg.action_scaling else ActionScaler()
    critic = build_critic(cfg, env, init_rng)
    target = critic.copy()
    opt = ad.AdamW(critic.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    store = ReplayStore(cfg.K, cfg.nstep, cfg.gamma, env.semantics, cfg.replay_capacity)
    for i, d in enumerate(demos):
        d = d.relabeled(True)
        d.actions = scaler.to_agent(d.actions)
        store.add_episode(d, ("demo", i), demo=True)

    log = RunLog(meta={"config_hash": config_hash(cfg), "seed": seed, "env": cfg.env, "K": cfg.K,
                       "n_demos": len(demos), "demo_success": float(np.mean([d.success for d in demos]))
                       if demos else float("nan")})
    actor = Actor(cfg.K, cfg.temporal_ensemble, cfg.ensemble_m)
    obs = env.reset(env_rng)
    ep, t, updates, credit = 0, 0, 0, 0.0
    td_acc, bc_acc, n_acc = 0.0, 0.0, 0
    stop = "total_steps"
    for step in range(1, cfg.total_steps + 1):
        seq = critic.act(obs[None])[0] if actor.needs_prediction(t) else None
        a = explore(actor.act(t, seq), cfg.exploration_sigma, act_rng)
        nxt, r, done, info = env.step(scaler.to_env(a))
        store.append(Transition(obs, a, r, nxt, info["terminal"]), ("online", ep))
        obs, t = nxt, t + 1
        if done:
            store.finalize_episode(("online", ep), env.success)
            ep, t = ep + 1, 0
            actor.reset()
            obs = env.reset(env_rng)

        credit += cfg.utd
        while credit >= 1.0 and (len(store.demo) or len(store.online)):
            credit -= 1.0
            batch = store.sample_mixed_batch(cfg.batch_size, sample_rng)
            opt.zero_grad()
            loss, info_l = critic_loss(critic, target, batch, cfg)
            ad.backward(loss)
            opt.step()
            _check_finite(critic, info_l.total)
            updates += 1
            if updates % cfg.target_update_interval == 0:
                soft_update(target, critic, cfg.tau)
            td_acc, bc_acc, n_acc = td_acc + info_l.td, bc_acc + info_l.bc, n_acc + 1

        over_time = cfg.time_limit_s > 0 and time.perf_counter() - t_start > cfg.time_limit_s
        if step % cfg.eval_every == 0 or step == cfg.total_steps or over_time:
            sr = evaluate(critic_policy(critic), cfg.env, cfg.eval_episodes, eval_seed, cfg.K,
                          cfg.temporal_ensemble, cfg.ensemble_m, cfg.eval_workers, scaler)
            row = RunRow(step, sr, td_acc / max(n_acc, 1), bc_acc / max(n_acc, 1), time.perf_counter() - t_start)
            log.add(row)
            td_acc, bc_acc, n_acc = 0.0, 0.0, 0
            if progress:
                progress(row)
            if cfg.stop_success > 0 and sr >= cfg.stop_success:
                stop = "stop_success"
                break
            if over_time:
                stop = "time_limit"
                break
    log.meta.update(stop=stop, updates=updates, episodes=ep)
    if checkpoint:
        save_agent(checkpoint, critic, scaler)
    return log


def save_agent(path, critic: SequenceCritic, scaler: ActionScaler):
    state = dict(critic.state_dict())
    if not scaler.identity:
        state["scaler.low"], state["scaler.high"] = scaler.low, scaler.high
    ad.save_checkpoint(path, state)


def load_agent(path, cfg: TrainConfig):
    state = ad.load_checkpoint(path)
    scaler = ActionScaler()
    if "scaler.low" in state:
        scaler = ActionScaler(state.pop("scaler.low").astype(np.float64), state.pop("scaler.high").astype(np.float64))
    critic = build_critic(cfg, make_env(cfg.env), 0)
    critic.load_state_dict(state)
    return critic, scaler


# ---------------------------------------------------------------- return-to-go study


def returns_to_go(rewards, gamma):
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def sequence_features(episode, K, semantics):
    """Rows ``[obs_t, a_t, ..., a_{t+K-1}]`` with null-action padding past the end."""
    T = len(episode)
    idx = np.arange(T)[:, None] + np.arange(K)
    valid = idx < T
    acts = episode.actions[np.minimum(idx, T - 1)]
    if ControlSemantics(semantics) is ControlSemantics.TORQUE:
        acts[~valid] = 0.0
    return np.concatenate([episode.obs, acts.reshape(T, -1)], axis=1)


def _fit_regressor(X, y, Xs, ys, Xv, yv, rng, hidden=64, epochs=300, lr=3e-3, batch=256):
    """Small MLP regressor trained with an L1 loss; returns held-out L1 on ``(Xv, yv)``.

    The weights kept are those of the epoch with the lowest L1 on the
    selection set ``(Xs, ys)``, which is disjoint from the reported one.
    """
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-6

    def prep(A):
        A = (A - mu) / sd
        return np.concatenate([A, np.ones((len(A), 1))], axis=1)

    X, Xs, Xv = prep(X), prep(Xs), prep(Xv)
    W1 = ad.Param(ad.uniform_fan_in(rng, hidden, X.shape[1]), "W1")
    W2 = ad.Param(ad.uniform_fan_in(rng, hidden, hidden + 1), "W2")
    W3 = ad.Param(np.zeros((1, hidden + 1)), "W3")
    params = [W1, W2, W3]
    opt = ad.AdamW(params, lr=lr, weight_decay=0.0)

    def forward(x):
        ones = ad.Tensor(np.ones(x.shape[:-1] + (1,)))
        z = ad.silu_layernorm(ad.linear(x, W1))
        z = ad.silu_layernorm(ad.linear(ad.concat([z, ones]), W2))
        return ad.reshape(ad.linear(ad.concat([z, ones]), W3), x.shape[:-1])

    def l1(A, b):
        with ad.no_grad():
            return float(np.mean(np.abs(forward(ad.Tensor(A)).data - b)))

    best, best_w = math.inf, None
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            rows = order[s:s + batch]
            opt.zero_grad()
            err = forward(ad.Tensor(X[rows])) - ad.Tensor(y[rows])
            ad.backward(ad.mean(ad.absolute(err)))
            opt.step()
        sel = l1(Xs, ys)
        if sel < best:
            best, best_w = sel, [p.data.copy() for p in params]
    for p, w in zip(params, best_w):
        p.data[...] = w
    return l1(Xv, yv)


def rtg_regression(demos, K_list, seed=0, gamma=0.99, semantics=ControlSemantics.POSITION, **fit_kw):
    """Held-out L1 of return-to-go regression from (obs, next K actions), per K.

    Episodes are split 80/20 into train and validation sets; a fifth of the
    training episodes is further held out to pick the regressor's epoch.
    """
    if len(demos) < 5:
        raise ValueError("rtg_regression needs at least 5 episodes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(demos))
    n_val = max(1, int(round(0.2 * len(demos))))
    n_sel = max(1, int(round(0.2 * (len(demos) - n_val))))
    val, sel, train = order[:n_val], order[n_val:n_val + n_sel], order[n_val + n_sel:]
    table = []
    for K in K_list:
        def stack(ids):
            X = np.concatenate([sequence_features(demos[i], K, semantics) for i in ids])
            y = np.concatenate([returns_to_go(demos[i].rewards, gamma) for i in ids])
            return X, y
        fit_rng = np.random.default_rng([seed, K])
        table.append((K, _fit_regressor(*stack(train), *stack(sel), *stack(val), fit_rng, **fit_kw)))
    return table


# ---------------------------------------------------------------- artifacts


def emit_artifacts(runs, out_dir, name="sweep"):
    """Write one CSV per run and one SVG learning curve per group.

    ``runs`` maps a group label to a list of RunLogs (one per seed); a plain
    list is treated as a single group called ``name``.
    """
    if isinstance(runs, (list, tuple)):
        runs = {name: list(runs)}
    if not runs or not any(runs.values()):
        raise ValueError("emit_artifacts needs at least one run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for label, logs in runs.items():
        for i, log in enumerate(logs):
            p = out / f"{label}_seed{log.meta.get('seed', i)}.csv"
            log.to_csv(p)
            written.append(p)
    svg = out / f"{name}.svg"
    plot_runs(runs, svg)
    written.append(svg)
    return written


def plot_runs(runs, path, ylabel="success rate"):
    """Mean over seeds with a min-max band, one line per group."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, logs in runs.items():
        logs = [g for g in logs if g.rows]
        if not logs:
            continue
        n = min(len(g.rows) for g in logs)
        steps = np.array([r.step for r in logs[0].rows[:n]])
        ys = np.array([[r.success_rate for r in g.rows[:n]] for g in logs])
        ax.plot(steps, ys.mean(axis=0), label=f"{label} (n={len(logs)})")
        ax.fill_between(steps, ys.min(axis=0), ys.max(axis=0), alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel)
    ax.set_title("mean over seeds, band = min-max")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
