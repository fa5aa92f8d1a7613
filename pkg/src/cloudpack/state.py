"""Packing state shared by the MILP builder, the simulator and the heuristics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class PendingMigration:
    vm: int
    from_host: int
    to_host: int
    remaining: int


def _ro(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PackingState:
    """Placement of every VM (``host[i] == -1`` when unplaced), its allocation,
    the hosts in use and the migrations still in flight."""

    host: np.ndarray
    alloc: np.ndarray
    used: np.ndarray
    pending: Tuple[PendingMigration, ...] = ()
    timestep: int = 0

    def __post_init__(self):
        host = _ro(self.host, int)
        n = host.shape[0]
        alloc = _ro(self.alloc, float)
        used = _ro(self.used, bool)
        if alloc.shape != (n,) or used.shape != (n,):
            raise ContractViolation("host, alloc and used must all have length N")
        if np.any(host < -1) or np.any(host >= n):
            raise ContractViolation(f"host index out of range: {host}")
        if np.any(alloc < 0):
            raise ContractViolation("allocations must be non-negative")
        object.__setattr__(self, "host", host)
        object.__setattr__(self, "alloc", alloc)
        object.__setattr__(self, "used", used)
        object.__setattr__(self, "pending", tuple(self.pending))

    @classmethod
    def empty(cls, n_vms: int, timestep: int = 0) -> "PackingState":
        return cls(np.full(n_vms, -1), np.zeros(n_vms), np.zeros(n_vms, bool),
                   (), timestep)

    @property
    def n_vms(self) -> int:
        return self.host.shape[0]

    @property
    def placed(self) -> np.ndarray:
        """``(N, N)`` VM x host indicator matrix."""
        p = np.zeros((self.n_vms, self.n_vms))
        on = self.host >= 0
        p[np.nonzero(on)[0], self.host[on]] = 1.0
        return p

    @property
    def alloc_matrix(self) -> np.ndarray:
        return self.placed * self.alloc[:, None]

    def host_load(self) -> np.ndarray:
        return self.alloc_matrix.sum(axis=0)

    def migrating(self) -> set:
        return {m.vm for m in self.pending}

    def evolve(self, **changes) -> "PackingState":
        return replace(self, **changes)


@dataclass(frozen=True)
class Decision:
    """First-step slice of a packing decision: one host per VM, allocations,
    and the hosts switched on."""

    host: np.ndarray
    alloc: np.ndarray
    used: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "host", _ro(self.host, int))
        object.__setattr__(self, "alloc", _ro(self.alloc, float))
        object.__setattr__(self, "used", _ro(self.used, bool))

    @classmethod
    def from_matrices(cls, placed: np.ndarray, alloc: np.ndarray,
                      used: np.ndarray, tol: float = 1e-6) -> "Decision":
        """Build from ``(N, N)`` placement/allocation matrices.

        Raises :class:`ContractViolation` if a VM sits on more than one host.
        """
        placed = np.asarray(placed, float)
        on = placed > 0.5
        if np.any(on.sum(axis=1) > 1):
            raise ContractViolation("a VM is placed on more than one host")
        host = np.where(on.any(axis=1), on.argmax(axis=1), -1)
        a = np.asarray(alloc, float).sum(axis=1)
        a = np.where(np.abs(a) < tol, 0.0, a)
        return cls(host, np.maximum(a, 0.0), np.asarray(used) > 0.5)
