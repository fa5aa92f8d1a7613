import numpy as np
import pytest

from cloudpack.nn import (Adam, AdamState, Critic, Forecaster, Tensor, adam_step, concat,
                          gradcheck, polyak_update, quantile_loss, stack, where)
from cloudpack.nn import checkpoint
from cloudpack.nn.tensor import numerical_gradient

RNG = np.random.default_rng(0)
A = RNG.normal(size=(3, 4))
B = RNG.normal(size=(3, 4))
M = RNG.normal(size=(4, 2))
POS = RNG.uniform(0.5, 2.0, size=(3, 4))
NZ = A + np.sign(A) * 0.1   # keep |x| and relu away from the kink

OPS = {
    "add": (lambda a, b: a + b, [A, B]),
    "add_broadcast": (lambda a, b: a + b, [A, B[0]]),
    "sub": (lambda a, b: a - b, [A, B]),
    "neg": (lambda a: -a, [A]),
    "mul": (lambda a, b: a * b, [A, B]),
    "div": (lambda a, b: a / b, [A, POS]),
    "pow": (lambda a: a ** 3, [A]),
    "matmul": (lambda a, m: a @ m, [A, M]),
    "getitem": (lambda a: a[1:, ::2], [A]),
    "sum_axis": (lambda a: a.sum(axis=0), [A]),
    "mean": (lambda a: a.mean(axis=1), [A]),
    "reshape": (lambda a: a.reshape(4, 3) * np.arange(12.0).reshape(4, 3), [A]),
    "transpose": (lambda a: a.T @ np.ones((3, 2)), [A]),
    "relu": (lambda a: a.relu(), [NZ]),
    "sigmoid": (lambda a: a.sigmoid(), [A]),
    "tanh": (lambda a: a.tanh(), [A]),
    "exp": (lambda a: a.exp(), [A]),
    "abs": (lambda a: a.abs(), [NZ]),
    "concat": (lambda a, b: concat([a, b], axis=1) * 2.0, [A, B]),
    "stack": (lambda a, b: stack([a, b * b], axis=0), [A, B]),
    "where": (lambda a, b: where(A > 0, a, b * 3.0), [A, B]),
    "shared": (lambda a: a * a + a.tanh() * a, [A]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name):
    fn, inputs = OPS[name]
    assert gradcheck(fn, inputs) <= 1e-4


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    (y + y * y).backward()
    # d/dx (3x + 9x^2) = 3 + 18x
    assert x.grad[0] == pytest.approx(39.0)


def test_numerical_gradient_restores_input():
    x = np.array([1.0, 2.0])
    g = numerical_gradient(lambda: float((x ** 2).sum()), x)
    assert np.allclose(g, [2, 4]) and x.tolist() == [1.0, 2.0]


def test_forecaster_shapes_and_determinism():
    m = Forecaster(3, horizon=4, quantiles=(0.1, 0.5, 0.9), hidden=8, seed=1)
    x = np.random.default_rng(1).normal(size=(1, 6, 3))
    out = m(np.concatenate([x, x]))
    assert out.shape == (2, 4, 3)
    assert np.array_equal(out.value[0], out.value[1])
    assert m.median_index() == 1
    m2 = Forecaster(3, horizon=4, quantiles=(0.1, 0.5, 0.9), hidden=8, seed=1)
    assert np.array_equal(m2(np.concatenate([x, x])).value, out.value)


def test_zero_output_layer_predicts_bias():
    m = Forecaster(2, horizon=3, hidden=5, seed=0, scale=100.0)
    m.head.W.value[:] = 0.0
    out = m(np.random.default_rng(2).normal(size=(4, 7, 2))).value
    assert np.allclose(out, (m.head.b.value * 100.0).reshape(1, 3, 1))


def _param_gradcheck(module, loss_fn, eps=1e-5, n_checks=25):
    module.zero_grad()
    loss_fn().backward()
    ana = module.flat_grad()
    flat = module.flat_params()
    rng = np.random.default_rng(0)
    idx = rng.choice(flat.size, size=min(n_checks, flat.size), replace=False)
    num = np.zeros(idx.size)
    for j, k in enumerate(idx):
        for sgn in (1, -1):
            f = flat.copy()
            f[k] += sgn * eps
            module.set_flat_params(f)
            num[j] += sgn * float(loss_fn().value)
        num[j] /= 2 * eps
    module.set_flat_params(flat)
    denom = max(np.abs(num).max(), np.abs(ana[idx]).max(), 1e-8)
    return np.abs(ana[idx] - num).max() / denom


def test_forecaster_parameter_gradients():
    m = Forecaster(3, horizon=2, quantiles=(0.5, 0.9), n_layers=2, hidden=6, seed=3)
    x = np.random.default_rng(3).normal(size=(2, 5, 3))
    assert _param_gradcheck(m, lambda: m(x).sum()) <= 1e-4


def test_critic_parameter_gradients():
    c = Critic(5, 3, action_horizon=2, embed=4, hidden=6, seed=4)
    rng = np.random.default_rng(4)
    s = rng.normal(size=(2, 3, 5))
    a = rng.uniform(0, 100, size=(2, 3, 2))
    assert c(s, Tensor(a)).shape == (2,)
    assert _param_gradcheck(c, lambda: c(s, Tensor(a)).sum()) <= 1e-4


def test_quantile_loss_examples():
    assert float(quantile_loss(np.array([8.0]), np.array([10.0]), 0.5).value) == pytest.approx(1.0)
    assert float(quantile_loss(np.array([8.0]), np.array([10.0]), 0.9).value) == pytest.approx(1.8)
    assert float(quantile_loss(np.array([3.0, 4.0]), np.array([3.0, 4.0]), 0.3).value) == 0.0
    for q in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            quantile_loss(np.zeros(1), np.zeros(1), q)


def test_adam_examples():
    g = np.array([0.3, -2.0, 0.0])
    st = AdamState.zeros(3)
    out = adam_step(np.zeros(3), g, 0.01, st)
    # first bias-corrected step is -lr * g / (|g| + eps)
    assert np.allclose(out, -0.01 * g / (np.abs(g) + 1e-8))
    assert np.array_equal(adam_step(np.ones(2), np.zeros(2), 0.1, AdamState.zeros(2)), np.ones(2))
    a = adam_step(np.ones(3), g, 0.01, AdamState.zeros(3))
    b = adam_step(np.ones(3), g, 0.01, AdamState.zeros(3))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        adam_step(np.ones(2), np.ones(3), 0.1, AdamState.zeros(2))


def test_adam_module_descends():
    m = Forecaster(1, horizon=1, hidden=3, seed=0, scale=1.0)
    opt = Adam(m, lr=0.05)
    x = np.zeros((1, 2, 1))
    before = float((m(x) ** 2).sum().value)
    for _ in range(50):
        m.zero_grad()
        (m(x) ** 2).sum().backward()
        opt.step()
    assert float((m(x) ** 2).sum().value) < before


def test_polyak_examples():
    assert polyak_update(np.zeros(2), np.ones(2), 0.95) == pytest.approx([0.05, 0.05])
    assert polyak_update(np.full(2, 3.0), np.ones(2), 1.0).tolist() == [3.0, 3.0]
    assert polyak_update(np.full(2, 3.0), np.ones(2), 0.0).tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        polyak_update(np.zeros(1), np.zeros(1), 1.5)


def test_polyak_contracts_geometrically():
    targ, theta = np.zeros(4), np.ones(4)
    gaps = []
    for _ in range(5):
        targ = polyak_update(targ, theta, 0.9)
        gaps.append(np.linalg.norm(targ - theta))
    assert np.allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9)


def test_checkpoint_round_trip(tmp_path):
    m = Forecaster(3, horizon=2, quantiles=(0.5, 0.9), hidden=4, seed=7)
    x = np.random.default_rng(0).normal(size=(2, 5, 3))
    p = checkpoint.save(m, tmp_path / "m.json")
    m2 = checkpoint.load(p)
    assert np.array_equal(m(x).value, m2(x).value)
    c = Critic(4, 2, seed=1)
    c2 = checkpoint.copy_module(c)
    assert np.array_equal(c.flat_params(), c2.flat_params())


def test_nan_parameters_are_rejected():
    m = Forecaster(1, horizon=1, hidden=2, seed=0)
    m.head.b.value[0] = np.nan
    with pytest.raises(FloatingPointError):
        m.check_finite()
