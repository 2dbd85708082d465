import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqnas import autodiff as ad
from cqnas.autodiff import Param, Tensor


def p64(x, name="p"):
    return Param(np.asarray(x, dtype=np.float64), name)


# ---------------------------------------------------------------- linear


def test_linear_examples():
    np.testing.assert_array_equal(ad.linear(Tensor([1.0, 2.0]), p64(np.eye(2))).data, [1, 2])
    np.testing.assert_array_equal(ad.linear(Tensor([1.0, -1.0]), p64([[2, 0], [0, 3]])).data, [2, -3])
    np.testing.assert_array_equal(ad.linear(Tensor([0.0, 0.0]), p64(np.random.rand(3, 2))).data, [0, 0, 0])


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        ad.linear(Tensor(np.ones(3)), p64(np.ones((2, 2))))


def test_linear_grads_by_hand():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    W = p64([[1.0, 2.0], [3.0, 4.0]])
    y = ad.linear(x, W)
    ad.backward(ad.sum(y * Tensor([1.0, 10.0])))
    np.testing.assert_allclose(W.grad, np.outer([1, 10], [1, -2]))
    np.testing.assert_allclose(x.grad, np.array([1.0, 10.0]) @ W.data)


# ---------------------------------------------------------------- activations


def test_silu_layernorm_examples():
    np.testing.assert_allclose(ad.silu_layernorm(Tensor([1.0, 1.0, 1.0])).data, 0.0)
    np.testing.assert_allclose(ad.layernorm(Tensor([1.0, -1.0])).data, [1, -1], atol=1e-5)
    assert math.isclose(float(ad.silu(Tensor(1.0)).data), 0.731059, abs_tol=1e-6)
    # the fused op agrees with the composition
    x = np.random.default_rng(1).normal(size=(4, 7))
    np.testing.assert_allclose(ad.silu_layernorm(Tensor(x)).data, ad.silu(ad.layernorm(Tensor(x))).data, atol=1e-12)


def test_silu_layernorm_needs_two_features():
    with pytest.raises(ValueError):
        ad.silu_layernorm(Tensor([3.0]))


# ---------------------------------------------------------------- gru


def _zero_gru(H=1, D=1):
    z = lambda *s: p64(np.zeros(s))
    return z(3 * H, D), z(3 * H, H), z(3 * H), z(3 * H)


def test_gru_cell_zero_weights():
    W = _zero_gru()
    np.testing.assert_allclose(ad.gru_cell(Tensor([0.3]), Tensor([1.0]), *W).data, [0.5])
    np.testing.assert_allclose(ad.gru_cell(Tensor([0.3]), Tensor([0.0]), *W).data, [0.0])


def test_gru_matches_cell_loop(rng):
    H, D, T = 4, 3, 5
    W = [p64(rng.normal(size=s) * 0.5) for s in [(3 * H, D), (3 * H, H), (3 * H,), (3 * H,)]]
    xs = rng.normal(size=(2, T, D))
    out = ad.gru(Tensor(xs), *W).data
    h = np.zeros((2, H))
    for t in range(T):
        h = ad.gru_cell(Tensor(xs[:, t]), Tensor(h), *W).data
        np.testing.assert_allclose(out[:, t], h, atol=1e-12)


def test_gru_cell_reference_formula(rng):
    H, D = 3, 2
    Wih, Whh, bih, bhh = (rng.normal(size=s) for s in [(3 * H, D), (3 * H, H), (3 * H,), (3 * H,)])
    x, h = rng.normal(size=D), rng.normal(size=H)
    sig = lambda v: 1 / (1 + np.exp(-v))
    gi, gh = Wih @ x + bih, Whh @ h + bhh
    r, z = sig(gi[:H] + gh[:H]), sig(gi[H:2 * H] + gh[H:2 * H])
    n = np.tanh(gi[2 * H:] + r * gh[2 * H:])
    expect = (1 - z) * n + z * h
    got = ad.gru_cell(Tensor(x), Tensor(h), *(p64(a) for a in (Wih, Whh, bih, bhh))).data
    np.testing.assert_allclose(got, expect, atol=1e-12)


# ---------------------------------------------------------------- softmax / losses


def test_softmax_cross_entropy_examples():
    ce = lambda l, t: float(ad.softmax_cross_entropy(Tensor(np.array(l, float)), t).data)
    assert math.isclose(ce([0, 0], [1, 0]), math.log(2), rel_tol=1e-12)
    assert math.isclose(ce([0, 0], [0.5, 0.5]), math.log(2), rel_tol=1e-12)
    assert math.isclose(ce([10, -10], [1, 0]), math.log1p(math.exp(-20)), rel_tol=1e-6)


def test_softmax_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros(2)), [0.7, 0.7])
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros(2)), [1.5, -0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_cross_entropy_at_least_entropy(seed, A):
    r = np.random.default_rng(seed)
    t = r.dirichlet(np.ones(A))
    loss = float(ad.softmax_cross_entropy(Tensor(r.normal(size=A) * 3), t).data)
    ent = -float(np.sum(t * np.log(np.where(t > 0, t, 1))))
    assert loss >= ent - 1e-12 >= -1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_normalized(seed):
    x = np.random.default_rng(seed).normal(size=(5, 9)) * 20
    p = ad.softmax(Tensor(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_margin_loss_example():
    q = Tensor(np.array([1.0, 2.0, 0.5]))
    assert math.isclose(float(ad.margin_loss(q, 0, 0.1).data), 1.1, rel_tol=1e-12)
    assert float(ad.margin_loss(Tensor(np.array([3.0, 1.0, 0.5])), 0, 0.1).data) == 0.0
    assert float(ad.margin_loss(Tensor(np.array([3.0, 1.0, 0.5])), 0, 0.0).data) == 0.0


def test_dueling_example():
    val = Tensor(np.ones((1, 1)))
    adv = Tensor(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(ad.dueling(val, adv, axis=-2).data.ravel(), [0, 1, 2])


def test_expectation_matches_composition(rng):
    z = np.linspace(-2, 2, 7)
    x = rng.normal(size=(3, 7))
    np.testing.assert_allclose(ad.expectation(Tensor(x), z).data, (ad.softmax(Tensor(x)).data * z).sum(-1),
                               atol=1e-14)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    ad.backward(x * x)
    assert float(x.grad) == 6.0


def test_backward_constant():
    W = p64(np.ones((2, 2)))
    ad.backward(Tensor(np.array(5.0)))
    np.testing.assert_array_equal(W.grad, 0.0)


def test_backward_non_scalar_rejected():
    W = p64(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.linear(Tensor([1.0, 1.0]), W))


def test_backward_accumulates_until_zeroed():
    W = p64(np.ones((1, 2)))
    x = Tensor([1.0, 2.0])
    for _ in range(2):
        ad.backward(ad.sum(ad.linear(x, W)))
    np.testing.assert_array_equal(W.grad, [[2.0, 4.0]])
    W.zero_grad()
    np.testing.assert_array_equal(W.grad, 0.0)


def test_two_layer_chain_gradcheck(rng):
    W1, W2 = p64(rng.normal(size=(4, 3))), p64(rng.normal(size=(1, 4)))
    x = Tensor(rng.normal(size=(5, 3)))
    f = lambda: ad.sum(ad.linear(ad.silu(ad.linear(x, W1)), W2))
    assert ad.gradcheck(f, [W1, W2]) < 1e-6


def test_no_grad_records_nothing():
    W = p64(np.ones((2, 2)))
    with ad.no_grad():
        y = ad.linear(Tensor([1.0, 2.0]), W)
    assert ad.tape_size() == 0 and not y.requires_grad


def test_grad_mode_is_thread_local():
    seen = {}
    with ad.no_grad():
        t = threading.Thread(target=lambda: seen.setdefault("on", ad.grad_enabled()))
        t.start()
        t.join()
        assert not ad.grad_enabled()
    assert seen["on"]


def test_forward_is_deterministic(rng):
    W = p64(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(2, 4)))
    a = ad.silu_layernorm(ad.linear(x, W)).data
    b = ad.silu_layernorm(ad.linear(x, W)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- optimizer


def test_adamw_examples():
    p = p64([1.0])
    ad.adamw_step([p], lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p.data, [1.0])

    p = p64([1.0])
    ad.adamw_step([p], lr=0.1, wd=0.1)
    np.testing.assert_allclose(p.data, [0.99], rtol=1e-15)

    p = p64([0.0])
    p.grad[:] = 1.0
    ad.adamw_step([p], lr=0.1, wd=0.0)
    np.testing.assert_allclose(p.data, [-0.1], rtol=1e-6)


def _adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adamw_without_decay_is_adam():
    grads = [0.3, -1.2, 0.5, 2.0]
    p = p64([0.7])
    for g in grads:
        p.grad[:] = g
        ad.adamw_step([p], lr=0.05, wd=0.0)
    assert math.isclose(float(p.data[0]), _adam_reference(0.7, grads, 0.05), rel_tol=1e-12)
    assert p.step == len(grads)


def test_adamw_decay_is_decoupled():
    # decay shrinks theta before the Adam step and never enters the moments
    p = p64([2.0])
    p.grad[:] = 1.0
    ad.adamw_step([p], lr=0.1, wd=0.5)
    assert math.isclose(float(p.data[0]), 2.0 * (1 - 0.05) - 0.1 * 1 / (1 + 1e-8), rel_tol=1e-12)
    np.testing.assert_allclose(p.m, [0.1])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    state = {"a.W": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
             "s": np.float32(2.5) * np.ones(())}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, state)
    raw = path.read_bytes()
    header = raw[:raw.index(b"\n\n")].decode().splitlines()
    assert header == ["a.W 3 4", "b 5", "s"]
    assert len(raw) - raw.index(b"\n\n") - 2 == 4 * (12 + 5 + 1)
    back = ad.load_checkpoint(path)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])


def test_checkpoint_rejects_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, {"w": np.ones(4, np.float32)})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
