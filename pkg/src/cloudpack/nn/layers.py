"""Networks built on :mod:`cloudpack.nn.tensor`: a GRU multi-quantile
forecaster (the actor) and a feed-forward critic."""
from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from .tensor import Tensor, concat


class Module:
    """Holds named parameters, possibly inside child modules."""

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                for k, p in val.parameters().items():
                    out[f"{key}.{k}"] = p
            elif isinstance(val, (list, tuple)):
                for j, m in enumerate(val):
                    if isinstance(m, Module):
                        for k, p in m.parameters().items():
                            out[f"{key}.{j}.{k}"] = p
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.parameters().values()])

    def set_flat_params(self, flat: np.ndarray):
        k = 0
        for p in self.parameters().values():
            n = p.value.size
            p.value = np.array(flat[k:k + n], dtype=float).reshape(p.shape)
            k += n

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.value)).ravel()
            for p in self.parameters().values()])

    @property
    def n_params(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def check_finite(self):
        for name, p in self.parameters().items():
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"non-finite values in parameter {name}")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
        b = np.zeros(n_out) if zero else _uniform(rng, n_in, (n_out,))
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class GRUCell(Module):
    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.Wx = Tensor(_uniform(rng, n_hidden, (n_in, 3 * n_hidden)), requires_grad=True)
        self.Wh = Tensor(_uniform(rng, n_hidden, (n_hidden, 3 * n_hidden)), requires_grad=True)
        self.b = Tensor(_uniform(rng, n_hidden, (3 * n_hidden,)), requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.n_hidden
        gx = x @ self.Wx + self.b
        gh = h @ self.Wh
        z = (gx[:, :H] + gh[:, :H]).sigmoid()
        r = (gx[:, H:2 * H] + gh[:, H:2 * H]).sigmoid()
        n = (gx[:, 2 * H:] + r * gh[:, 2 * H:]).tanh()
        return (1.0 - z) * n + z * h


class Forecaster(Module):
    """Stacked GRU over a demand/covariate window with one linear head per
    (horizon step, quantile).

    Input: ``(B, L, F)`` window; output ``(B, horizon, n_quantiles)`` in
    demand units. The network works on demand divided by ``scale``, so the
    head output is multiplied by ``scale``.
    """

    def __init__(self, n_features: int, horizon: int, quantiles: Sequence[float] = (0.5,),
                 n_layers: int = 2, hidden: int = 32, seed: int = 0, scale: float = 100.0):
        rng = np.random.default_rng(seed)
        self.config = {"n_features": n_features, "horizon": horizon,
                       "quantiles": list(quantiles), "n_layers": n_layers,
                       "hidden": hidden, "seed": seed, "scale": scale}
        self.horizon = horizon
        self.quantiles = tuple(quantiles)
        self.scale = scale
        self.hidden = hidden
        self.cells = [GRUCell(n_features if k == 0 else hidden, hidden, rng)
                      for k in range(n_layers)]
        self.head = Linear(hidden, horizon * len(self.quantiles), rng)

    def __call__(self, window) -> Tensor:
        x = window.value if isinstance(window, Tensor) else np.asarray(window, float)
        B, L, _ = x.shape
        hs = [Tensor(np.zeros((B, self.hidden))) for _ in self.cells]
        for k in range(L):
            inp = Tensor(x[:, k, :])
            for j, cell in enumerate(self.cells):
                hs[j] = cell(inp, hs[j])
                inp = hs[j]
        out = self.head(hs[-1]).reshape(B, self.horizon, len(self.quantiles))
        return out * self.scale

    def median_index(self) -> int:
        q = np.asarray(self.quantiles)
        return int(np.argmin(np.abs(q - 0.5)))


class Critic(Module):
    """``Q(s, a)``: a shared per-VM embedding mean-pooled over VMs, joined
    with the flattened action, then two rectified layers."""

    def __init__(self, n_state_features: int, n_vms: int, action_horizon: int = 2,
                 embed: int = 16, hidden: int = 64, seed: int = 0, scale: float = 100.0):
        rng = np.random.default_rng(seed)
        self.config = {"n_state_features": n_state_features, "n_vms": n_vms,
                       "action_horizon": action_horizon, "embed": embed,
                       "hidden": hidden, "seed": seed, "scale": scale}
        self.scale = scale
        self.embed = Linear(n_state_features, embed, rng)
        self.fc1 = Linear(embed + n_vms * action_horizon, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng)

    def __call__(self, state, action: Tensor) -> Tensor:
        """``state``: ``(B, N, F)`` array; ``action``: ``(B, N, H)`` tensor in
        demand units. Returns ``(B,)``."""
        s = np.asarray(state, float)
        B, N, F = s.shape
        e = self.embed(Tensor(s.reshape(B * N, F))).relu()
        pooled = e.reshape(B, N, -1).mean(axis=1)
        a = Tensor._wrap(action)
        z = concat([pooled, (a * (1.0 / self.scale)).reshape(B, -1)], axis=1)
        z = self.fc2(self.fc1(z).relu()).relu()
        return self.out(z).reshape(B)


def quantile_loss(pred, target, q: float) -> Tensor:
    """Pinball loss ``sum max(q e, (q - 1) e)`` with ``e = target - pred``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    e = Tensor._wrap(target) - Tensor._wrap(pred)
    # max(q e, (q-1) e) = q e + max(-e, 0)
    return (e * q + (-e).relu()).sum()
