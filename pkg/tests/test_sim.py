import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudpack.errors import ContractViolation
from cloudpack.milp import CostConfig
from cloudpack.sim import EpisodeReport, check_capacity, run_episode, step
from cloudpack.state import Decision, PackingState
from cloudpack.trace import DemandTrace, WorkloadSchedule, make_covariates

C = CostConfig(100, 10, 1000, capacity=100)


def _state(host, alloc):
    host = np.asarray(host)
    used = np.zeros(len(host), bool)
    used[host[host >= 0]] = True
    return PackingState(host, np.asarray(alloc, float), used)


def test_steady_state_costs_hosts_only():
    s = _state([0, 0, 1], [30, 40, 50])
    out = step(s, Decision(s.host, s.alloc, s.used), [30, 40, 50], 0, C)
    assert out.cost_breakdown.host == 200
    assert out.cost_breakdown.migration == 0 and out.cost_breakdown.throttle == 0


def test_throttle_fraction():
    s = _state([0], [50])
    out = step(s, Decision([0], [50], [1]), [70], 0, C)
    assert out.cost_breakdown.throttle == pytest.approx(0.2 * 1000)


def test_allocation_clipped_to_demand():
    s = _state([0], [50])
    out = step(s, Decision([0], [90], [1]), [70], 0, C)
    assert out.next_state.alloc[0] == 70


def test_delayed_migration_freezes_allocation():
    s = _state([0, 1], [30, 40])
    move = Decision([1, 1], [60, 40], [0, 1])
    out1 = step(s, move, [60, 40], 2, C)
    assert out1.next_state.host[0] == 0 and out1.next_state.alloc[0] == 30
    assert out1.next_state.pending[0].remaining == 2
    assert out1.cost_breakdown.migration == 0
    out2 = step(out1.next_state, Decision([0, 1], [80, 40], [1, 1]), [60, 40], 2, C)
    assert out2.next_state.host[0] == 0 and out2.next_state.alloc[0] == 30
    assert out2.next_state.pending[0].remaining == 1
    out3 = step(out2.next_state, move, [60, 40], 2, C)
    assert out3.next_state.host[0] == 1 and not out3.next_state.pending
    assert out3.completed_migrations == 1
    assert out3.cost_breakdown.migration == 10


def test_immediate_migration_and_arrival():
    s = PackingState.empty(2)
    out = step(s, Decision([0, 0], [20, 30], [1, 0]), [20, 30], 0, C)
    assert out.next_state.host.tolist() == [0, 0]
    assert out.cost_breakdown.migration == 0
    out = step(out.next_state, Decision([0, 1], [20, 30], [1, 1]), [20, 30], 0, C)
    assert out.next_state.host.tolist() == [0, 1]
    assert out.cost_breakdown.migration == 10


def test_departure_frees_host():
    s = _state([0, 0], [20, 30])
    out = step(s, Decision([0, 0], [20, 30], [1, 0]), [20, 0], 0, C,
               active=np.array([True, False]))
    assert out.next_state.host.tolist() == [0, -1]
    assert out.cost_breakdown.total == 100


def test_double_placement_rejected():
    s = PackingState.empty(2)
    with pytest.raises(ContractViolation):
        step(s, {"placed": np.ones((2, 2)), "alloc": np.zeros((2, 2)),
                 "used": np.ones(2)}, [1, 1], 0, C)
    with pytest.raises(ContractViolation):
        step(s, Decision([0, 0], [1, 1], [1, 0]), [1, 1], -1, C)


def test_capacity_repair():
    s = PackingState.empty(2)
    out = step(s, Decision([0, 0], [80, 70], [1, 0]), [80, 70], 0, C)
    assert out.next_state.host_load()[0] <= 100
    assert out.cost_breakdown.throttle == pytest.approx(50 * 10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), delay=st.integers(0, 3))
def test_random_proposals_keep_invariants(seed, delay):
    rng = np.random.default_rng(seed)
    n = 4
    state = PackingState.empty(n)
    for _ in range(8):
        y = rng.integers(0, 90, n).astype(float)
        dec = Decision(rng.integers(0, n, n), rng.integers(0, 100, n).astype(float),
                       np.ones(n, bool))
        before = {m.vm: (m.remaining, state.alloc[m.vm], state.host[m.vm])
                  for m in state.pending}
        out = step(state, dec, y, delay, C)
        nxt = out.next_state
        assert check_capacity(nxt, C.capacity)
        for m in nxt.pending:
            if m.vm in before:
                rem, a, h = before[m.vm]
                assert m.remaining == rem - 1
                assert nxt.alloc[m.vm] == a and nxt.host[m.vm] == h
            else:
                assert m.remaining == delay
        assert out.cost_breakdown.throttle >= 0
        state = nxt


def _flat_trace(n, T, value):
    return DemandTrace(np.full((n, T), value), make_covariates(n, T))


def test_run_episode_zero_demand():
    tr = _flat_trace(3, 10, 0.0)
    rep = run_episode(lambda obs: Decision(np.full(3, -1), np.zeros(3), np.zeros(3, bool)),
                      tr, WorkloadSchedule("burst", 3), 0, 5, C)
    assert rep.cumulative_regret == 0 and len(rep.records) == 5


def test_run_episode_partial_on_failure():
    calls = []

    def policy(obs):
        calls.append(obs.t)
        if len(calls) == 3:
            raise RuntimeError("boom")
        return Decision(np.zeros(2, int), np.full(2, 10.0), np.array([1, 0], bool))

    rep = run_episode(policy, _flat_trace(2, 10, 10.0), None, 0, 6, C)
    assert len(rep.records) == 2 and "boom" in rep.error


def test_run_episode_length_check():
    with pytest.raises(ContractViolation):
        run_episode(lambda o: None, _flat_trace(2, 5, 1.0), None, 0, 5, C)


def test_report_serialization(tmp_path):
    rep = run_episode(lambda obs: Decision([0, 0], [10.0, 10.0], [1, 0]),
                      _flat_trace(2, 8, 10.0), None, 0, 4, C)
    back = EpisodeReport.from_json(rep.to_json())
    assert back.records == rep.records
    rep.save(tmp_path / "ep")
    assert (tmp_path / "ep.csv").read_text().splitlines()[0] == \
        "t,host_cost,migr_cost,throttle_cost,cumulative"
    assert json.loads((tmp_path / "ep.json").read_text())["records"][0]["host_cost"] == 100
