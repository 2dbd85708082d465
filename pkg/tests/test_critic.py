import numpy as np
import pytest

from cqnas import autodiff as ad
from cqnas.autodiff import Tensor
from cqnas.c2f import ActionSpaceSpec, IntervalBox, zoom_in
from cqnas.critic import CriticConfig, SequenceCritic, chosen_logits


def make(seed=0, K=4, L=3, B=5, N=2, hidden=16, obs_dim=5, dtype="float64", **kw):
    cfg = CriticConfig(obs_dim=obs_dim, action=ActionSpaceSpec(dims=N, levels=L, bins=B), K=K, hidden=hidden,
                       atoms=11, dtype=dtype, **kw)
    return SequenceCritic(cfg, np.random.default_rng(seed))


def stub_levels(critic, favored):
    """Replace level_forward by constant logits that favor ``favored[l]``."""
    cfg = critic.cfg
    N, B, A = cfg.action.dims, cfg.action.bins, cfg.atoms

    def fwd(level, h, prev):
        lead = ad.as_tensor(h).shape[:-1]
        logits = np.zeros(lead + (cfg.K, N, B, A))
        fav = favored[level]
        if fav is not None:
            logits[..., fav, -1] = 5.0
        return Tensor(logits)

    critic.level_forward = fwd


# ---------------------------------------------------------------- encoder / heads


def test_zero_weights_zero_features():
    c = make()
    for W in c.encoder:
        W.data[...] = 0
    h = c.encode_observation(np.random.default_rng(1).normal(size=(3, 5)))
    np.testing.assert_array_equal(h.data, 0.0)


def test_encoder_sees_observation_scale(rng):
    c = make()
    obs = rng.normal(size=(1, 5))
    assert not np.allclose(c.encode_observation(obs).data, c.encode_observation(2 * obs).data)
    np.testing.assert_allclose(c.encode_observation(obs).data, c.encode_observation(obs[0]).data[None])


def test_encoder_rejects_nan_and_wrong_size():
    c = make()
    with pytest.raises(ValueError):
        c.encode_observation([np.nan] * 5)
    with pytest.raises(ValueError):
        c.encode_observation(np.zeros(4))


def test_encoder_gradient_wrt_obs(rng):
    c = make()
    obs = ad.Param(rng.normal(size=(2, 5)), "obs")
    w = rng.normal(size=(2, 16))

    def f():
        x = ad.concat([obs, Tensor(np.ones((2, 1)))])
        for W in c.encoder:
            x = ad.silu_layernorm(ad.linear(x, W))
        return ad.sum(x * Tensor(w))

    assert ad.gradcheck(f, [obs]) < 1e-3


def test_zero_projection_gives_uniform_atoms(rng):
    c = make()
    for lv in c.levels:
        lv.adv.data[...] = 0
        lv.val.data[...] = 0
    h = c.encode_observation(rng.normal(size=(3, 5)))
    logits = c.level_forward(0, h, np.zeros((3, 4, 2)))
    np.testing.assert_allclose(ad.softmax(logits).data, 1 / 11, atol=1e-15)
    np.testing.assert_allclose(c.expected_q(logits).data, 0.0, atol=1e-15)


def test_level_forward_shape_and_k_mismatch(rng):
    c = make()
    h = c.encode_observation(rng.normal(size=(3, 5)))
    assert c.level_forward(1, h, np.zeros((3, 4, 2))).shape == (3, 4, 2, 5, 11)
    with pytest.raises(ValueError):
        c.level_forward(0, h, np.zeros((3, 5, 2)))


def test_causality(rng):
    c = make()
    h = c.encode_observation(rng.normal(size=(2, 5)))
    prev = rng.uniform(-1, 1, size=(2, 4, 2))
    base = c.level_forward(1, h, prev).data
    for k in range(3):
        p2 = prev.copy()
        p2[:, k + 1:] = rng.uniform(-1, 1, size=p2[:, k + 1:].shape)
        out = c.level_forward(1, h, p2).data
        np.testing.assert_array_equal(out[:, :k + 1], base[:, :k + 1])


def test_step_features_layout(rng):
    c = make()
    h = rng.normal(size=(2, 16))
    prev = rng.uniform(-1, 1, size=(2, 4, 2))
    x = c.step_features(h, prev).data
    assert x.shape == (2, 4, 16 + 2 + 4)
    np.testing.assert_array_equal(x[:, :, :16], np.broadcast_to(h[:, None], (2, 4, 16)))
    np.testing.assert_array_equal(x[:, :, 16:18], prev)
    np.testing.assert_array_equal(x[0, :, 18:], np.eye(4))


def test_expected_q_in_range(rng):
    c = make()
    for lv in c.levels:
        lv.adv.data *= 50
    h = c.encode_observation(rng.normal(size=(4, 5)))
    q = c.expected_q(c.level_forward(0, h, np.zeros((4, 4, 2)))).data
    assert q.min() >= -2 and q.max() <= 2


def test_no_dueling_has_no_value_head():
    c = make(dueling=False)
    assert all(lv.val is None for lv in c.levels)
    assert not any(p.name.endswith("val.W") for p in c.params)


# ---------------------------------------------------------------- greedy


def test_greedy_middle_path_is_zero(rng):
    c = make()
    stub_levels(c, [2, 2, 2])
    a, path = c.greedy_sequence(rng.normal(size=(3, 16)))
    np.testing.assert_array_equal(a, 0.0)
    np.testing.assert_array_equal(path.bins, 2)


def test_greedy_last_then_first():
    c = make()
    stub_levels(c, [4, 0, 0])
    a, _ = c.greedy_sequence(np.zeros(16))
    np.testing.assert_allclose(a, 0.608, atol=1e-12)


def test_greedy_ties_break_low():
    c = make()
    stub_levels(c, [None, None, None])
    a, path = c.greedy_sequence(np.zeros(16))
    np.testing.assert_array_equal(path.bins, 0)
    np.testing.assert_allclose(a, -1 + 1 / 125, atol=1e-12)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_greedy_consistency(dtype):
    for seed in range(10):
        c = make(seed, dtype=dtype)
        h = c.encode_observation(np.random.default_rng(seed + 100).normal(size=(3, 5)))
        a, gp = c.greedy_sequence(h)
        assert a.dtype == np.dtype(dtype)
        logits, path = c.q_of_sequence(h, a)
        np.testing.assert_array_equal(path.bins, gp.bins)
        for l in range(3):
            q = c.expected_q(logits[l]).data
            chosen = np.take_along_axis(q, path.bins[l][..., None], axis=-1)[..., 0]
            np.testing.assert_array_equal(chosen, q.max(axis=-1))
            np.testing.assert_array_equal(q, gp.qvalues[l])


def test_random_sequence_dominated(rng):
    c = make()
    h = c.encode_observation(rng.normal(size=(3, 5)))
    logits, path = c.q_of_sequence(h, rng.uniform(-1, 1, size=(3, 4, 2)))
    for l in range(3):
        q = c.expected_q(logits[l]).data
        chosen = c.expected_q(chosen_logits(logits[l], path.bins[l])).data
        assert np.all(chosen <= q.max(axis=-1) + 1e-12)


def test_dims_are_decentralized(rng):
    c = make()
    h = c.encode_observation(rng.normal(size=5))
    s1 = rng.uniform(-1, 1, size=(4, 2))
    s2 = s1.copy()
    s2[:, 1] = rng.uniform(-1, 1, size=4)
    _, p1 = c.q_of_sequence(h, s1)
    _, p2 = c.q_of_sequence(h, s2)
    np.testing.assert_array_equal(p1.bins[..., 0], p2.bins[..., 0])


def test_q_of_sequence_rejects_out_of_range(rng):
    c = make()
    h = c.encode_observation(rng.normal(size=5))
    with pytest.raises(ValueError):
        c.q_of_sequence(h, np.full((4, 2), 1.5))


def single_action_cqn(critic, obs):
    """Plain coarse-to-fine CQN inference for a K=1 critic, one observation at a time."""
    spec, dt = critic.cfg.action, critic.dtype
    N, B, A = spec.dims, spec.bins, critic.cfg.atoms
    out = []
    with ad.no_grad():
        for o in obs:
            h = critic.encode_observation(o[None])
            iv = IntervalBox(spec.low_array, spec.high_array)
            prev = np.zeros((1, N), dt)
            for lv in critic.levels:
                x = ad.concat([h, Tensor(prev), Tensor(np.ones((1, 1), dt))])
                for W in lv.mlp:
                    x = ad.silu_layernorm(ad.linear(x, W))
                s = ad.gru_cell(x, Tensor(np.zeros((1, critic.cfg.hidden), dt)), lv.W_ih, lv.W_hh, lv.b_ih, lv.b_hh)
                adv = ad.reshape(ad.linear(s, lv.adv), (N, B, A))
                val = ad.reshape(ad.linear(s, lv.val), (N, 1, A))
                q = ad.expectation(ad.dueling(val, adv), critic.atoms).data
                b = np.argmax(q, axis=-1)
                iv = zoom_in(iv, b, B)
                prev = (0.5 * (iv.low + iv.high)).astype(dt)[None]
            out.append(prev[0])
    return np.array(out)


def test_k1_equals_single_action_cqn(rng):
    for seed in range(5):
        c = make(seed, K=1)
        obs = rng.normal(size=(4, 5))
        got = np.stack([c.act(o[None])[0, 0] for o in obs])
        np.testing.assert_array_equal(got, single_action_cqn(c, obs))


# ---------------------------------------------------------------- parameters


def test_state_round_trip(tmp_path, rng):
    c = make(dtype="float32")
    path = tmp_path / "c.ckpt"
    c.save(path)
    d = make(seed=9, dtype="float32")
    d.load(path)
    obs = rng.normal(size=(2, 5))
    np.testing.assert_array_equal(c.act(obs), d.act(obs))


def test_load_state_strict():
    c = make()
    sd = dict(c.state_dict())
    sd.pop("encoder.0.W")
    with pytest.raises(ValueError):
        c.load_state_dict(sd)
    sd = dict(c.state_dict())
    sd["encoder.0.W"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        c.load_state_dict(sd)


def test_copy_is_deep(rng):
    c = make()
    d = c.copy()
    d.levels[0].adv.data += 1
    assert not np.array_equal(c.levels[0].adv.data, d.levels[0].adv.data)
    assert [p.name for p in c.params] == [p.name for p in d.params]
    assert d.levels[0].adv is d.params[[p.name for p in d.params].index("level0.adv.W")]


def test_init_is_seeded():
    a, b = make(3), make(3)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.data, q.data)
    W = a.levels[0].W_hh.data
    H = a.cfg.hidden
    np.testing.assert_allclose(W[:H] @ W[:H].T, np.eye(H), atol=1e-12)
