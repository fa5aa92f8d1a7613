"""Predict-and-Critic: DDPG-style training of the forecaster (the actor)
against a two-step MILP with a learned terminal Q-function (the critic).

Per decision time the actor forecasts two steps, the flavor's MILP is
solved and its first step applied; the transition is stored with its
reward ``-regret`` and the regret gradient in the actor's parameters. Each
update samples a batch and takes gradient steps on

    L1 = mean (Q(s, a) - (r + gamma * Q_targ(s', a')))^2      (critic and actor)
    L2 = -mean Q(s, m(s))                                    (actor)

with the actor's step combining ``alpha2 * dL2 + alpha1 * dL1``.
"""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, SolverError
from .features import critic_state, forecaster_window
from .nn import Adam, Tensor, checkpoint, polyak_update
from .pno import (RegretGradMethod, TrainConfig, _CsvLog, _prepare, decision_step,
                  param_gradient)
from .state import PackingState
from .trace import DemandTrace, WorkloadSchedule

log = logging.getLogger(__name__)

ACTION_HORIZON = 2


@dataclass
class Transition:
    window: np.ndarray           # actor input at t, (N, L, F)
    state: np.ndarray            # critic state at t: history and alloc*_{t-1}
    action: np.ndarray           # (N, 2) forecast the actor produced
    next_window: np.ndarray
    next_state: np.ndarray       # critic state at t+1 with alloc*_t
    reward: float                # -regret
    regret_grad: np.ndarray      # d regret / d omega, flat

    def __post_init__(self):
        if np.shape(self.action)[-1] != ACTION_HORIZON:
            raise ValueError("PnC actions cover exactly two steps")
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """FIFO buffer with seeded sampling without replacement."""

    def __init__(self, capacity: int = 10_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition):
        self.items.append(tr)

    def sample(self, k: int) -> List[Transition]:
        k = min(k, len(self.items))
        idx = self.rng.choice(len(self.items), size=k, replace=False)
        return [self.items[i] for i in idx]


@dataclass
class PncConfig:
    alpha1: float = 0.05
    alpha2: float = 0.95
    rho: float = 0.95
    discount: float = 0.9
    batch: int = 32
    capacity: int = 10_000
    freeze_q_through_reward: bool = False
    use_target_actor: bool = False
    reward_scale: float = 1e-3
    reward: str = "realized"         # or "model": the signed MILP regret
    seed: int = 0

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ConfigurationError("alpha1 and alpha2 must be positive")
        if not (0 <= self.rho <= 1 and 0 <= self.discount <= 1):
            raise ConfigurationError("rho and discount must lie in [0, 1]")
        if self.reward not in ("realized", "model"):
            raise ConfigurationError(f"unknown reward {self.reward!r}")
        if self.batch < 1 or self.reward_scale <= 0:
            raise ConfigurationError("batch and reward_scale must be positive")


def actor_actions(actor, windows: np.ndarray) -> Tensor:
    """Two-step median forecasts for a stack of windows ``(B, N, L, F)``,
    returned as ``(B, N, 2)``."""
    B, N = windows.shape[:2]
    out = actor(windows.reshape(B * N, *windows.shape[2:]))
    return out[:, :ACTION_HORIZON, actor.median_index()].reshape(B, N, ACTION_HORIZON)


def _stack(batch: Sequence[Transition], name: str) -> np.ndarray:
    return np.stack([getattr(tr, name) for tr in batch])


@dataclass
class CriticLoss:
    loss: float
    grad_theta: np.ndarray
    td: np.ndarray                       # Q(s, a) - target, per sample
    grad_omega: Optional[np.ndarray] = None


def critic_loss(batch: Sequence[Transition], critic, target_critic, actor,
                discount: float, reward_scale: float = 1.0, target_actor=None,
                freeze_q_through_reward: bool = False,
                policy_actions: Optional[Tensor] = None) -> CriticLoss:
    """Squared TD error and its gradients in the critic and the actor.

    ``a'`` is computed by ``actor`` (or ``target_actor``) on the next state
    and the bootstrap target is held constant. In the actor the gradient is
    ``mean 2 td (dQ(s, m(s))/domega - dr/domega)`` with the stored regret
    gradient (``dr = -reward_scale * dregret``); with
    ``freeze_q_through_reward`` the Q term is dropped.
    """
    if not batch:
        raise ValueError("empty batch")
    S, S2 = _stack(batch, "state"), _stack(batch, "next_state")
    A = _stack(batch, "action")
    r = np.array([tr.reward for tr in batch]) * reward_scale
    nxt = target_actor if target_actor is not None else actor
    a2 = actor_actions(nxt, _stack(batch, "next_window")).value
    target = r + discount * target_critic(S2, Tensor(a2)).value
    critic.zero_grad()
    q = critic(S, Tensor(A))
    td_t = q - target
    loss = (td_t * td_t).mean()
    loss.backward()
    grad_theta = critic.flat_grad()
    critic.zero_grad()
    td = td_t.value
    B = len(batch)

    dreg = _stack(batch, "regret_grad")
    # -dr/domega = +reward_scale * dregret/domega
    grad_omega = (2.0 / B) * (td @ dreg) * reward_scale
    if not freeze_q_through_reward:
        a = policy_actions if policy_actions is not None else actor_actions(
            actor, _stack(batch, "window"))
        actor.zero_grad()
        (critic(S, a) * (2.0 * td / B)).sum().backward()
        grad_omega = grad_omega + actor.flat_grad()
        actor.zero_grad()
        critic.zero_grad()
    return CriticLoss(float(loss.value), grad_theta, td, grad_omega)


def actor_loss(batch: Sequence[Transition], critic, actor,
               policy_actions: Optional[Tensor] = None):
    """``-mean Q(s, m(s))`` and its gradient in the actor's parameters."""
    if not batch:
        raise ValueError("empty batch")
    S = _stack(batch, "state")
    a = policy_actions if policy_actions is not None else actor_actions(
        actor, _stack(batch, "window"))
    actor.zero_grad()
    loss = -critic(S, a).mean()
    loss.backward()
    grad = actor.flat_grad()
    actor.zero_grad()
    critic.zero_grad()
    return float(loss.value), grad


def combine_actor_gradient(grad_l1: np.ndarray, grad_l2: np.ndarray,
                           alpha1: float, alpha2: float) -> np.ndarray:
    return alpha2 * np.asarray(grad_l2) + alpha1 * np.asarray(grad_l1)


@dataclass
class PncTrainer:
    """Holds the networks, their targets, optimizers and the buffer."""

    actor: object
    critic: object
    config: PncConfig
    lr: float = 1e-3
    target_actor: object = field(init=False)
    target_critic: object = field(init=False)
    buffer: ReplayBuffer = field(init=False)

    def __post_init__(self):
        self.target_actor = checkpoint.copy_module(self.actor)
        self.target_critic = checkpoint.copy_module(self.critic)
        self.buffer = ReplayBuffer(self.config.capacity, self.config.seed)
        self.opt_actor = Adam(self.actor, self.lr)
        self.opt_critic = Adam(self.critic, self.lr)
        self.n_updates = 0

    def update(self) -> float:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch)
        a = actor_actions(self.actor, _stack(batch, "window"))
        l1 = critic_loss(batch, self.critic, self.target_critic, self.actor,
                         cfg.discount, cfg.reward_scale,
                         self.target_actor if cfg.use_target_actor else None,
                         cfg.freeze_q_through_reward, policy_actions=a)
        _, g2 = actor_loss(batch, self.critic, self.actor, policy_actions=a)
        # descent on both losses, see the module docstring
        self.opt_critic.step(cfg.alpha1 * l1.grad_theta)
        self.opt_actor.step(combine_actor_gradient(l1.grad_omega, g2, cfg.alpha1,
                                                   cfg.alpha2))
        self.actor.check_finite()
        self.critic.check_finite()
        for net, targ in ((self.critic, self.target_critic),
                          (self.actor, self.target_actor)):
            targ.set_flat_params(polyak_update(targ.flat_params(), net.flat_params(),
                                               cfg.rho))
        self.n_updates += 1
        return l1.loss


def train_pnc(actor, critic, dataset: DemandTrace, method: RegretGradMethod,
              config: PncConfig, train: TrainConfig,
              schedule: Optional[WorkloadSchedule] = None):
    """The PnC loop over ``train.epochs`` episodes of ``train.t0 - 1`` steps.

    The MILP horizon is always two steps. Updates run after every stored
    transition once the buffer holds a full batch. Returns the trainer.
    """
    if actor.horizon < ACTION_HORIZON:
        raise ConfigurationError("the actor must forecast at least two steps")
    trace, mask = _prepare(dataset, schedule)
    lo, hi = train.t_start + 1, train.t_start + train.t0
    if hi + ACTION_HORIZON > trace.n_steps:
        raise ConfigurationError("trace too short for the training window")
    trainer = PncTrainer(actor, critic, config, train.lr)
    logger = _CsvLog(train.log_path, ["epoch", "regret", "critic_loss", "skipped",
                                      "buffer", "wall_time"])
    scale = critic.scale
    t_begin = time.perf_counter()
    cache: dict = {}
    for epoch in range(train.epochs):
        state = PackingState.empty(trace.n_vms, timestep=lo)
        total, losses, skipped = 0.0, [], 0
        for t in range(lo, hi):
            try:
                res = decision_step(actor, trace, mask, t, state, method,
                                    ACTION_HORIZON, train, cache)
            except SolverError as exc:
                log.warning("epoch %d t=%d skipped: %s", epoch, t, exc)
                skipped += 1
                state = PackingState.empty(trace.n_vms, timestep=t + 1)
                continue
            cost = res.realized if config.reward == "realized" else res.regret
            total += cost
            trainer.buffer.add(Transition(
                window=forecaster_window(trace.demands, trace.covariates, t,
                                         train.lookback, actor.scale),
                state=critic_state(trace.demands, t, state.alloc, train.lookback, scale),
                action=res.yhat.value.copy(),
                next_window=forecaster_window(trace.demands, trace.covariates, t + 1,
                                              train.lookback, actor.scale),
                next_state=critic_state(trace.demands, t + 1, res.next_state.alloc,
                                        train.lookback, scale),
                reward=-cost,
                regret_grad=param_gradient(actor, res.yhat, res.grad_forecast),
            ))
            state = res.next_state
            if len(trainer.buffer) >= config.batch:
                losses.append(trainer.update())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        logger.add(epoch, total, mean_loss, skipped, len(trainer.buffer),
                   round(time.perf_counter() - t_begin, 3))
    logger.flush()
    if train.checkpoint_path:
        # a directory holding the four networks
        out = Path(train.checkpoint_path)
        checkpoint.save(actor, out / "actor.json")
        checkpoint.save(critic, out / "critic.json")
        checkpoint.save(trainer.target_actor, out / "target_actor.json")
        checkpoint.save(trainer.target_critic, out / "target_critic.json")
    return trainer
