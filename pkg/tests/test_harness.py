import math

import numpy as np
import pytest

from cqnas import harness
from cqnas.c2f import ControlSemantics
from cqnas.envs import make_env, scripted_demo
from cqnas.harness import (ConfigError, RunLog, RunRow, TrainingDiverged, config_to_text, emit_artifacts, evaluate,
                           expert_policy, load_agent, make_config, parse_config_text, random_policy, returns_to_go,
                           rtg_regression, run_training, sequence_features)
from cqnas.learning import TrainConfig

TINY = dict(K=2, hidden=8, batch_size=8, n_demos=3, total_steps=60, eval_every=30, eval_episodes=3, atoms=11)


def tiny(**kw):
    return make_config({**TINY, **kw})


# ---------------------------------------------------------------- config


def test_make_config_types_and_errors():
    cfg = make_config({"K": "4", "lr": "1e-4", "dueling": "false", "env": "pendulum"})
    assert (cfg.K, cfg.lr, cfg.dueling, cfg.env) == (4, 1e-4, False, "pendulum")
    with pytest.raises(ConfigError, match="bogus"):
        make_config({"bogus": 1})
    with pytest.raises(ConfigError, match="K"):
        make_config({"K": "eight"})
    with pytest.raises(ConfigError, match="gamma"):
        make_config({"gamma": "1.5"})
    with pytest.raises(ConfigError, match="K"):
        make_config({"K": "2.5"})


def test_config_text_round_trip():
    cfg = make_config({"K": 3, "lr": 2.5e-4, "env": "arm_reach"})
    assert make_config(parse_config_text(config_to_text(cfg))) == cfg
    assert parse_config_text("# c\nK = 4  # trailing\n\n") == {"K": "4"}
    with pytest.raises(ConfigError):
        parse_config_text("K 4")


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path))
    assert harness.output_dir() == tmp_path
    monkeypatch.delenv(harness.OUTPUT_ENV)
    assert str(harness.output_dir()) == "runs"


# ---------------------------------------------------------------- run log


def test_runlog_invariants():
    log = RunLog()
    log.add(RunRow(10, 0.5, 1.0, 2.0, 0.1))
    with pytest.raises(ValueError):
        log.add(RunRow(10, 0.5, 1.0, 2.0, 0.2))
    with pytest.raises(TrainingDiverged):
        log.add(RunRow(20, 0.5, float("nan"), 2.0, 0.2))


def test_csv_round_trip(tmp_path):
    log = RunLog()
    for i in range(3):
        log.add(RunRow(100 * (i + 1), i / 3, math.pi * i, 1 / 7, 0.123456789 * i))
    p = tmp_path / "r.csv"
    log.to_csv(p)
    assert p.read_text().splitlines()[0] == "step,success_rate,td_loss,bc_loss,wall_s"
    assert RunLog.from_csv(p).rows == log.rows


def test_emit_artifacts(tmp_path):
    logs = []
    for s in range(3):
        log = RunLog(meta={"seed": s})
        for i in range(4):
            log.add(RunRow(i + 1, s / 3, 0.0, 0.0, 0.0))
        logs.append(log)
    files = emit_artifacts({"k8": logs}, tmp_path, name="demo")
    assert sorted(f.name for f in files) == ["demo.svg", "k8_seed0.csv", "k8_seed1.csv", "k8_seed2.csv"]
    assert "(n=3)" in (tmp_path / "demo.svg").read_text()
    with pytest.raises(ValueError):
        emit_artifacts({}, tmp_path)


# ---------------------------------------------------------------- evaluation


def test_expert_and_random_baselines():
    assert evaluate(expert_policy("reach2d", 8), "reach2d", 25, seed=0) == 1.0
    assert evaluate(random_policy(2, 8, seed=0), "reach2d", 100, seed=0) < 0.1
    assert evaluate(expert_policy("pendulum", 8), "pendulum", 5, seed=0) == 1.0


def test_evaluate_workers_and_errors():
    pol = expert_policy("arm_reach", 4)
    a = evaluate(pol, "arm_reach", 10, seed=3, K=4)
    b = evaluate(pol, "arm_reach", 10, seed=3, K=4, workers=3)
    assert a == b
    with pytest.raises(ValueError):
        evaluate(pol, "arm_reach", 0)


def test_receding_horizon_eval():
    assert evaluate(expert_policy("reach2d", 4), "reach2d", 10, K=4, temporal_ensemble=False) == 1.0


# ---------------------------------------------------------------- training


def test_training_deterministic_and_finite(tmp_path):
    a = run_training(tiny(), seed=1, checkpoint=tmp_path / "a.ckpt")
    b = run_training(tiny(), seed=1)
    assert a.deterministic_rows() == b.deterministic_rows()
    assert [r.step for r in a.rows] == [30, 60]
    assert all(math.isfinite(v) for r in a.rows for v in (r.success_rate, r.td_loss, r.bc_loss, r.wall_s))
    assert a.meta["updates"] == 60 and a.meta["stop"] == "total_steps"
    critic, scaler = load_agent(tmp_path / "a.ckpt", tiny())
    assert not scaler.identity
    assert critic.act(np.zeros((1, 6))).shape == (1, 2, 2)


def test_utd_half():
    log = run_training(tiny(utd=0.5, total_steps=40, eval_every=40), seed=0)
    assert log.meta["updates"] == 20


def test_bc_only_arm():
    log = run_training(tiny(rl_loss_scale=0.0, total_steps=30), seed=0)
    assert all(r.td_loss == 0.0 for r in log.rows) and log.rows[-1].bc_loss > 0


def test_torque_env_trains():
    log = run_training(tiny(env="pendulum", total_steps=30, eval_episodes=1), seed=0)
    assert len(log.rows) == 1


def test_stored_action_is_executed_action(monkeypatch):
    executed, stored = [], []
    real_explore, real_append = harness.explore, harness.ReplayStore.append

    def explore(*a, **kw):
        out = real_explore(*a, **kw)
        executed.append(out.copy())
        return out

    def append(self, t, ep_id):
        if ep_id[0] == "online":
            stored.append(np.array(t.action))
        return real_append(self, t, ep_id)

    monkeypatch.setattr(harness, "explore", explore)
    monkeypatch.setattr(harness.ReplayStore, "append", append)
    run_training(tiny(total_steps=20, eval_every=20, exploration_sigma=0.3), seed=0)
    assert len(executed) == len(stored) == 20
    for e, s in zip(executed, stored):
        np.testing.assert_array_equal(e, s)


def test_divergence_is_an_error(monkeypatch):
    real = harness.critic_loss

    def poisoned(*a, **kw):
        loss, info = real(*a, **kw)
        info.total = float("nan")
        return loss, info

    monkeypatch.setattr(harness, "critic_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        run_training(tiny(), seed=0)


def test_time_limit_stops_cleanly():
    log = run_training(tiny(total_steps=10_000, eval_every=10_000, time_limit_s=1e-9), seed=0)
    assert log.meta["stop"] == "time_limit" and len(log.rows) == 1


def test_demo_dir(tmp_path):
    from cqnas.replay import save_episode
    rng = np.random.default_rng(0)
    for i in range(2):
        save_episode(tmp_path / f"d{i}.ep", scripted_demo(make_env("reach2d"), 0.0, 0.0, rng), "position")
    log = run_training(tiny(demo_dir=str(tmp_path), total_steps=10, eval_every=10), seed=0)
    assert log.meta["n_demos"] == 2
    with pytest.raises(ConfigError):
        run_training(tiny(demo_dir=str(tmp_path / "missing")), seed=0)


# ---------------------------------------------------------------- return-to-go study


def test_returns_to_go():
    np.testing.assert_allclose(returns_to_go([0, 0, 1], 0.5), [0.25, 0.5, 1.0])


def test_sequence_features_padding():
    ep = scripted_demo(make_env("pendulum"), 0.0, 0.0, np.random.default_rng(0))
    X = sequence_features(ep, 3, ControlSemantics.TORQUE)
    assert X.shape == (len(ep), 3 + 3)
    np.testing.assert_array_equal(X[-1, 4:], 0.0)
    ep = scripted_demo(make_env("reach2d"), 0.0, 0.0, np.random.default_rng(0))
    X = sequence_features(ep, 3, ControlSemantics.POSITION)
    np.testing.assert_array_equal(X[-1, 6:], np.tile(ep.actions[-1], 3))


def test_rtg_regression_small():
    rng = np.random.default_rng(0)
    demos = [scripted_demo(make_env("reach2d"), 0.0, 0.0, rng) for _ in range(6)]
    table = rtg_regression(demos, [1, 4], seed=0, epochs=30)
    assert [k for k, _ in table] == [1, 4]
    assert all(0 <= l1 < 0.2 for _, l1 in table)
    with pytest.raises(ValueError):
        rtg_regression(demos[:4], [1])


def test_default_config_matches_toy_defaults():
    cfg = TrainConfig()
    assert (cfg.K, cfg.levels, cfg.bins, cfg.atoms, cfg.hidden, cfg.batch_size) == (8, 3, 5, 51, 128, 64)
    assert (cfg.tau, cfg.rl_loss_scale, cfg.bc_loss_scale, cfg.ensemble_m, cfg.exploration_sigma) == \
        (0.02, 0.1, 1.0, 0.01, 0.01)
