"""Online first-fit and best-fit packers.

Placed VMs never move. Every step each placed VM gets ``min(demand,
residual)`` on its host (VMs served in index order), then arriving VMs are
packed one at a time, in index order, onto an open host chosen by the rule,
or onto the lowest-index empty host when none fits.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .state import Decision, PackingState


def _pack(state: PackingState, demand, capacity: int, active, choose) -> PackingState:
    n = state.n_vms
    demand = np.asarray(demand, float)
    active = np.ones(n, bool) if active is None else np.asarray(active, bool)
    host = np.where(active, state.host, -1)
    alloc = np.zeros(n)
    load = np.zeros(n)
    for i in range(n):
        if host[i] >= 0:
            h = host[i]
            alloc[i] = min(demand[i], capacity - load[h])
            load[h] += alloc[i]
    for i in range(n):
        if not active[i] or host[i] >= 0:
            continue
        open_hosts = np.unique(host[host >= 0])
        residual = capacity - load[open_hosts]
        h = choose(open_hosts, residual, demand[i])
        if h is None:
            h = int(next(k for k in range(n) if k not in set(open_hosts)))
        host[i] = h
        alloc[i] = min(demand[i], capacity - load[h])
        load[h] += alloc[i]
    used = np.zeros(n, bool)
    used[host[host >= 0]] = True
    return PackingState(host, alloc, used, (), state.timestep)


def _first(hosts, residual, d) -> Optional[int]:
    fits = np.nonzero(residual >= d)[0]
    return int(hosts[fits[0]]) if fits.size else None


def _best(hosts, residual, d) -> Optional[int]:
    fits = np.nonzero(residual >= d)[0]
    if not fits.size:
        return None
    # smallest leftover, ties to the lowest host index (hosts are sorted)
    k = fits[np.argmin(residual[fits] - d)]
    return int(hosts[k])


def first_fit(state: PackingState, demand, capacity: int, active=None) -> PackingState:
    """Pack arrivals on the lowest-index open host with enough residual."""
    return _pack(state, demand, capacity, active, _first)


def best_fit(state: PackingState, demand, capacity: int, active=None) -> PackingState:
    """Pack arrivals where the residual left after placement is smallest."""
    return _pack(state, demand, capacity, active, _best)


HEURISTICS = {"first_fit": first_fit, "best_fit": best_fit}


class HeuristicPolicy:
    """Adapter exposing a heuristic to :func:`cloudpack.sim.run_episode`.

    Heuristics are online packers: they see each period's demand when the
    period starts (an arriving VM states its request), read here from the
    trace the episode runs on.
    """

    def __init__(self, kind: str, trace, capacity: int):
        if kind not in HEURISTICS:
            raise ValueError(f"unknown heuristic {kind!r}")
        self.kind = kind
        self.rule = HEURISTICS[kind]
        self.trace = trace
        self.capacity = capacity

    def __call__(self, obs) -> Decision:
        demand = self.trace.demands[:, obs.t + 1] * obs.active_next
        packed = self.rule(obs.state, demand, self.capacity, obs.active_next)
        return Decision(packed.host, packed.alloc, packed.used)
