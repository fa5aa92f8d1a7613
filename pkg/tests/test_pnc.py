import numpy as np
import pytest

from cloudpack.errors import ConfigurationError
from cloudpack.features import forecaster_window
from cloudpack.nn import Adam, Critic, Forecaster, Module, Tensor
from cloudpack.pnc import (ACTION_HORIZON, PncConfig, PncTrainer, ReplayBuffer, Transition,
                           actor_actions, actor_loss, combine_actor_gradient, critic_loss,
                           train_pnc)
from cloudpack.pno import RegretGradMethod, TrainConfig
from cloudpack.trace import generate_sinusoidal

N, L, F = 2, 4, 3


def _actor(seed=0):
    return Forecaster(F, horizon=2, n_layers=1, hidden=4, seed=seed)


def _critic(seed=1):
    return Critic(L + 1, N, embed=4, hidden=6, seed=seed)


def _batch(actor, B=4, seed=0, dreg=None):
    rng = np.random.default_rng(seed)
    out = []
    for b in range(B):
        w = rng.normal(size=(N, L, F))
        a = actor_actions(actor, w[None]).value[0]
        out.append(Transition(
            window=w, state=rng.normal(size=(N, L + 1)), action=a,
            next_window=rng.normal(size=(N, L, F)), next_state=rng.normal(size=(N, L + 1)),
            reward=float(rng.normal()),
            regret_grad=(np.zeros(actor.n_params) if dreg is None
                         else rng.normal(size=actor.n_params)),
        ))
    return out


class LinearCritic(Module):
    """``Q(s, a) = k * sum(a)``, increasing in the action for ``k > 0``."""

    def __init__(self, k=1.0):
        self.k = Tensor(np.array([k]), requires_grad=True)

    def __call__(self, state, action):
        a = Tensor._wrap(action)
        B = a.shape[0]
        return a.reshape(B, -1).sum(axis=1) * self.k


def _zero_critic():
    c = _critic()
    c.out.W.value[:] = 0.0
    c.out.b.value[:] = 0.0
    return c


def _fd(fn, flat, eps=1e-5, idx=None):
    idx = range(flat.size) if idx is None else idx
    out = []
    for k in idx:
        p, m = flat.copy(), flat.copy()
        p[k] += eps
        m[k] -= eps
        out.append((fn(p) - fn(m)) / (2 * eps))
    return np.array(out)


# -- L1 -------------------------------------------------------------------------

def test_critic_loss_zero_q_unit_loss():
    actor, c = _actor(), _zero_critic()
    batch = _batch(actor)
    for tr in batch:
        tr.reward = -1.0
    out = critic_loss(batch, c, c, actor, discount=0.0)
    assert out.loss == pytest.approx(1.0)
    assert np.allclose(out.td, 1.0)


def test_critic_loss_grad_theta_matches_finite_differences():
    actor, c = _actor(), _critic()
    targ = _critic(seed=5)
    batch = _batch(actor, seed=2)
    out = critic_loss(batch, c, targ, actor, discount=0.9)
    theta = c.flat_params()

    def loss_at(flat):
        c.set_flat_params(flat)
        return critic_loss(batch, c, targ, actor, 0.9).loss

    idx = np.random.default_rng(0).choice(theta.size, 30, replace=False)
    fd = _fd(loss_at, theta, idx=idx)
    c.set_flat_params(theta)
    scale = max(np.abs(fd).max(), 1e-8)
    assert np.abs(out.grad_theta[idx] - fd).max() / scale <= 1e-4


def test_critic_loss_grad_omega_matches_finite_differences():
    # stored actions equal the actor's outputs and the bootstrap target is
    # held constant, so dL1/domega only flows through Q(s, m(s))
    actor, c = _actor(), _critic()
    batch = _batch(actor, seed=3)
    out = critic_loss(batch, c, c, actor, discount=0.9)
    target = np.array([tr.reward for tr in batch]) + 0.9 * c(
        np.stack([tr.next_state for tr in batch]),
        actor_actions(actor, np.stack([tr.next_window for tr in batch]))).value
    S = np.stack([tr.state for tr in batch])
    W = np.stack([tr.window for tr in batch])
    omega = actor.flat_params()

    def loss_at(flat):
        actor.set_flat_params(flat)
        q = c(S, actor_actions(actor, W)).value
        return float(np.mean((q - target) ** 2))

    fd = _fd(loss_at, omega)
    actor.set_flat_params(omega)
    scale = max(np.abs(fd).max(), 1e-8)
    assert np.abs(out.grad_omega - fd).max() / scale <= 1e-4


def test_freeze_flag_keeps_only_the_reward_term():
    actor, c = _actor(), _critic()
    batch = _batch(actor, seed=4, dreg=True)
    frozen = critic_loss(batch, c, c, actor, 0.9, reward_scale=0.5,
                         freeze_q_through_reward=True)
    dreg = np.stack([tr.regret_grad for tr in batch])
    expect = 2.0 / len(batch) * (frozen.td @ dreg) * 0.5
    assert np.allclose(frozen.grad_omega, expect)
    full = critic_loss(batch, c, c, actor, 0.9, reward_scale=0.5)
    assert not np.allclose(full.grad_omega, frozen.grad_omega)
    assert np.array_equal(full.grad_theta, frozen.grad_theta)


def test_target_actor_flag_changes_bootstrap():
    actor, c = _actor(), _critic()
    batch = _batch(actor, seed=6)
    a = critic_loss(batch, c, c, actor, 0.9)
    b = critic_loss(batch, c, c, actor, 0.9, target_actor=_actor(seed=9))
    assert a.loss != b.loss


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        critic_loss([], _critic(), _critic(), _actor(), 0.9)
    with pytest.raises(ValueError):
        actor_loss([], _critic(), _actor())


# -- L2 -------------------------------------------------------------------------

def test_actor_loss_constant_critic_zero_gradient():
    actor, c = _actor(), _zero_critic()
    c.out.b.value[:] = 3.0
    loss, g = actor_loss(_batch(actor), c, actor)
    assert loss == pytest.approx(-3.0)
    assert np.all(g == 0)


def test_actor_loss_gradient_matches_finite_differences():
    actor, c = _actor(), _critic()
    batch = _batch(actor, seed=7)
    _, g = actor_loss(batch, c, actor)
    omega = actor.flat_params()

    def loss_at(flat):
        actor.set_flat_params(flat)
        return actor_loss(batch, c, actor)[0]

    fd = _fd(loss_at, omega)
    actor.set_flat_params(omega)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8) <= 1e-4


def test_actor_loss_decreases_on_toy():
    actor = Forecaster(1, horizon=2, n_layers=1, hidden=3, seed=0)
    critic = LinearCritic(1.0)
    w = np.random.default_rng(0).normal(size=(1, 1, 3, 1))
    batch = [Transition(w[0], np.zeros((1, 1)), np.zeros((1, 2)), w[0], np.zeros((1, 1)),
                        0.0, np.zeros(actor.n_params))]
    opt = Adam(actor, 0.01)
    losses = []
    for _ in range(20):
        loss, g = actor_loss(batch, critic, actor)
        losses.append(loss)
        opt.step(g)
    assert np.all(np.diff(losses) < 0)


def test_combine_actor_gradient():
    g = np.array([0.5, -2.0])
    assert np.allclose(combine_actor_gradient(g, g, 0.05, 0.95), g)


# -- buffer ---------------------------------------------------------------------

def _tr(k):
    return Transition(np.zeros(1), np.zeros(1), np.full((1, 2), float(k)), np.zeros(1),
                      np.zeros(1), float(k), np.zeros(1))


def test_transition_invariants():
    with pytest.raises(ValueError):
        Transition(np.zeros(1), np.zeros(1), np.zeros((1, 3)), np.zeros(1), np.zeros(1),
                   0.0, np.zeros(1))
    with pytest.raises(ValueError):
        Transition(np.zeros(1), np.zeros(1), np.zeros((1, 2)), np.zeros(1), np.zeros(1),
                   float("nan"), np.zeros(1))


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=3)
    for k in range(5):
        buf.add(_tr(k))
    assert len(buf) == 3
    assert [tr.reward for tr in buf.items] == [2.0, 3.0, 4.0]


def test_buffer_sampling_seeded_without_replacement():
    a, b = ReplayBuffer(seed=4), ReplayBuffer(seed=4)
    for k in range(20):
        a.add(_tr(k))
        b.add(_tr(k))
    sa, sb = a.sample(8), b.sample(8)
    assert [t.reward for t in sa] == [t.reward for t in sb]
    assert len({t.reward for t in sa}) == 8
    assert len(a.sample(50)) == 20


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PncConfig(alpha1=0)
    with pytest.raises(ConfigurationError):
        PncConfig(rho=1.5)
    with pytest.raises(ConfigurationError):
        PncConfig(discount=-0.1)
    with pytest.raises(ConfigurationError):
        PncConfig(reward="profit")


# -- trainer --------------------------------------------------------------------

def test_update_moves_targets_only_by_polyak():
    actor, critic = _actor(), _critic()
    tr = PncTrainer(actor, critic, PncConfig(batch=4, rho=0.9), lr=0.01)
    for t in _batch(actor, B=6, seed=8, dreg=True):
        tr.buffer.add(t)
    old_a, old_c = tr.target_actor.flat_params(), tr.target_critic.flat_params()
    tr.update()
    assert np.allclose(tr.target_actor.flat_params(),
                       0.9 * old_a + 0.1 * actor.flat_params())
    assert np.allclose(tr.target_critic.flat_params(),
                       0.9 * old_c + 0.1 * critic.flat_params())
    assert not np.array_equal(actor.flat_params(), old_a)


def test_target_gap_contracts_with_frozen_networks():
    actor, critic = _actor(), _critic()
    tr = PncTrainer(actor, critic, PncConfig(rho=0.8))
    tr.target_critic.set_flat_params(critic.flat_params() + 1.0)
    gaps = []
    from cloudpack.nn import polyak_update
    for _ in range(4):
        tr.target_critic.set_flat_params(polyak_update(
            tr.target_critic.flat_params(), critic.flat_params(), 0.8))
        gaps.append(np.linalg.norm(tr.target_critic.flat_params() - critic.flat_params()))
    assert np.allclose(np.array(gaps[1:]) / gaps[:-1], 0.8)


def _pnc_setup(t0=8, lookback=6):
    tr = generate_sinusoidal("mixed", 2, 40)
    actor = Forecaster(tr.covariates.shape[2] + 1, horizon=2, n_layers=1, hidden=6, seed=0)
    critic = Critic(lookback + 1, 2, embed=4, hidden=8, seed=1)
    train = TrainConfig(epochs=2, lr=1e-3, t_start=lookback, t0=t0, lookback=lookback)
    return tr, actor, critic, train


def test_buffer_grows_by_t0_minus_one_per_episode(tmp_path):
    tr, actor, critic, train = _pnc_setup()
    train.checkpoint_path = str(tmp_path / "pnc")
    trainer = train_pnc(actor, critic, tr, RegretGradMethod("hcspo"),
                        PncConfig(batch=100), train)
    assert len(trainer.buffer) == 2 * (train.t0 - 1)
    assert trainer.n_updates == 0
    names = sorted(p.name for p in (tmp_path / "pnc").iterdir())
    assert names == ["actor.json", "critic.json", "target_actor.json", "target_critic.json"]


def test_stored_action_is_the_actors_output():
    tr, actor, critic, train = _pnc_setup()
    train.epochs = 1
    trainer = train_pnc(actor, critic, tr, RegretGradMethod("hcspo"),
                        PncConfig(batch=100), train)
    for k, t in enumerate(range(train.t_start + 1, train.t_start + train.t0)):
        item = trainer.buffer.items[k]
        w = forecaster_window(tr.demands, tr.covariates, t, train.lookback, actor.scale)
        assert np.array_equal(item.window, w)
        assert np.array_equal(item.action, actor_actions(actor, w[None]).value[0])
        assert item.state.shape == (2, train.lookback + 1)
        assert item.regret_grad.shape == (actor.n_params,)


def test_training_updates_every_step_once_batch_is_full():
    tr, actor, critic, train = _pnc_setup()
    before = actor.flat_params()
    trainer = train_pnc(actor, critic, tr, RegretGradMethod("hcspo"),
                        PncConfig(batch=4), train)
    steps = 2 * (train.t0 - 1)
    assert trainer.n_updates == steps - 4 + 1
    assert not np.array_equal(before, actor.flat_params())


def test_pnc_rejects_one_step_actor():
    tr, _, critic, train = _pnc_setup()
    actor = Forecaster(tr.covariates.shape[2] + 1, horizon=1, seed=0)
    with pytest.raises(ConfigurationError):
        train_pnc(actor, critic, tr, RegretGradMethod("hcspo"), PncConfig(), train)
    assert ACTION_HORIZON == 2
