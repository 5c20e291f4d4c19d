import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vehicular_qio.exceptions import DimMismatch, EmptyCandidates, Overload
from vehicular_qio.fog import (
    FogCoefficients,
    FogState,
    TaskDescriptor,
    aggregate,
    allocate,
    allocation_objective,
    cache_hit,
    fog_delay,
    fog_tick,
    hazard_score,
    pick_route,
    privatize,
    schedule_subchannel,
    sketch,
)


def test_aggregate_examples():
    y = np.array([1.0, 2.0])
    np.testing.assert_array_equal(aggregate([(np.eye(2), y)], (np.zeros((2, 3)), np.ones(3))), y)
    y2 = np.array([3.0, 6.0])
    np.testing.assert_allclose(aggregate([(0.5 * np.eye(2), y), (0.5 * np.eye(2), y2)]), [2.0, 4.0])
    U = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_array_equal(aggregate([], (U, np.ones(2))), [3.0, 1.0])


def test_aggregate_dim_mismatch():
    with pytest.raises(DimMismatch):
        aggregate([(np.eye(2), np.ones(3))])
    with pytest.raises(DimMismatch):
        aggregate([])


def test_sketch_examples(rng):
    np.testing.assert_array_equal(sketch(rng.normal(size=3), rng.normal(size=(2, 4)), np.zeros((4, 3)), np.zeros(4)), 0)
    P = rng.normal(size=(3, 5))
    s = sketch(1e6 * rng.normal(size=4), P, rng.normal(size=(5, 4)), np.zeros(5))
    assert np.all(np.abs(s) <= np.abs(P).sum(axis=1) + 1e-12)
    assert sketch([0.5], [[1.0]], [[1.0]], [0.0])[0] == pytest.approx(0.462117, abs=1e-6)


def test_privatize():
    s = np.arange(4.0)
    np.testing.assert_array_equal(privatize(s, 0.0, 1), s)
    np.testing.assert_array_equal(privatize(s, 0.3, 7), privatize(s, 0.3, 7))
    noise = privatize(np.zeros(100_000), 0.7, 3)
    assert noise.var() == pytest.approx(0.49, rel=0.02)
    with pytest.raises(ValueError):
        privatize(s, -1.0, 0)


def test_hazard_examples():
    assert hazard_score([0.0], [[1.0]], 1.0, 0.0) == pytest.approx(np.log(2))
    assert hazard_score([0.0], [[1.0]], 1.0, 100.0) == pytest.approx(100.0)
    assert hazard_score([0.0], [[1.0]], 1.0, np.log(np.e - 1)) == pytest.approx(1.0)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 5), st.floats(-50, 50))
def test_hazard_nonnegative_monotone(a, b, alpha, beta):
    lo, hi = sorted((a, b))
    h_lo = hazard_score([lo], [[1.0]], alpha, beta)
    h_hi = hazard_score([hi], [[1.0]], alpha, beta)
    assert 0 <= h_lo <= h_hi


def test_pick_route():
    cands = [(5.0, 0.1, 1.0), (3.0, 0.9, 1.0), (7.0, 0.0, 1.0)]
    assert pick_route(cands, (1, 0, 0), 4.0, 3.0) is None
    assert pick_route(cands[:1], (0.4, 0.3, 0.3), 0.0, 3.0) == 0
    assert pick_route(cands, (1, 0, 0), 0.0, 3.0) == 1
    assert pick_route(cands, (0, 1, 0), 0.0, 3.0) == 2
    assert pick_route([(1.0, 0.0, 1.0), (1.0, 0.0, 4.0)], (0, 0, 1), 0.0, 3.0) == 1
    with pytest.raises(EmptyCandidates):
        pick_route([], (1, 0, 0), 0.0, 1.0)


def test_schedule_subchannel():
    assert schedule_subchannel([1.0, 2.0])[0] == 1
    assert schedule_subchannel([0.0, 0.0])[0] is None
    assert schedule_subchannel([2.0, 2.0])[0] == 0


def test_allocate_single_task_matches_grid():
    task = TaskDescriptor(1.0, work=0.008)
    s = allocate([task], FogState(C_cpu=10.0), eta=0.5, rounds=20_000)
    grid = np.linspace(0.01, 10.0, 200_001)
    obj = task.priority * task.work / grid + 0.5e-3 * grid**2
    assert s.cpu_shares[0] == pytest.approx(grid[obj.argmin()], abs=1e-4)
    assert s.dual_lambda == 0.0


def test_allocate_zero_tasks_decays_dual():
    s = allocate([], FogState(dual_lambda=0.5, C_cpu=1.0), eta=0.1, rounds=10)
    assert s.dual_lambda == 0.0
    assert s.cpu_shares.size == 0


def test_allocate_identical_tasks_share_equally():
    s = allocate([TaskDescriptor(1.0, 2.0), TaskDescriptor(1.0, 2.0)], FogState(C_cpu=1.0), rounds=500)
    assert abs(s.cpu_shares[0] - s.cpu_shares[1]) <= 1e-6


def test_allocate_capacity_invariants():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        tasks = [TaskDescriptor(rng.uniform(0.1, 2), rng.uniform(0, 3), rng.uniform(0, 1), rng.uniform(-1, 1)) for _ in range(n)]
        state = FogState(C_cpu=rng.uniform(0.2, 3), C_mem=rng.uniform(0.2, 3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = allocate(tasks, state, eta=rng.uniform(1e-3, 0.1), rounds=int(rng.integers(1, 200)))
        assert out.cpu_shares.sum() <= state.C_cpu + 1e-9
        assert out.cache_frac.sum() <= state.C_mem + 1e-9
        assert np.all((out.cache_frac >= 0) & (out.cache_frac <= 1))
        assert out.dual_lambda >= 0


def test_allocate_dual_vanishes_with_slack():
    s = allocate([TaskDescriptor(1.0, 0.001)], FogState(C_cpu=10.0, dual_lambda=5.0), eta=1e-2, rounds=100)
    assert s.cpu_shares.sum() < 10.0
    assert s.dual_lambda == 0.0


def test_allocate_objective_non_increasing_small_step():
    tasks = [TaskDescriptor(1.0, 0.05, 0.1, 0.2), TaskDescriptor(0.5, 0.02, 0.3, 0.1)]
    state = FogState(C_cpu=5.0, C_mem=2.0)
    prev = np.inf
    for _ in range(200):
        state = allocate(tasks, state, eta=1e-2, rounds=1)
        obj = allocation_objective(tasks, state.cpu_shares, state.cache_frac)
        assert obj <= prev + 1e-12
        prev = obj


def test_allocate_errors():
    with pytest.raises(ValueError):
        allocate([], FogState(), eta=0.0)
    with pytest.raises(ValueError):
        allocate([], FogState(), reg="lasso")
    with pytest.raises(ValueError):
        TaskDescriptor(0.0)


def test_fog_delay():
    assert fog_delay(1.0, 2.0, 1.0, 0.5) == pytest.approx(1.5)
    assert fog_delay(0.0, 2.0, 1.0, 0.0) == 0.0
    with pytest.raises(Overload):
        fog_delay(1.0, 1.0, 1.0, 0.0)


@given(st.one_of(st.just(0.0), st.floats(1e-6, 10)), st.floats(0.1, 10), st.floats(0, 10),
       st.one_of(st.just(0.0), st.floats(1e-6, 5)))
def test_fog_delay_positive(Z, gap, Lam, Delta):
    d = fog_delay(Z, Lam + gap, Lam, Delta)
    assert d >= 0
    if Z > 0 or Delta > 0:
        assert d > 0


def test_cache_hit():
    assert cache_hit(0.0, 5.0) == 0.0
    assert cache_hit(np.log(2), 1.0) == pytest.approx(0.5)
    vals = [cache_hit(0.3, r) for r in np.linspace(0, 20, 50)]
    assert np.all(np.diff(vals) >= 0) and vals[-1] < 1


def test_fog_tick_examples():
    s = FogState(backlog_Q=4.0)
    assert fog_tick(s, [2.0], [2.0]).backlog_Q == 4.0
    assert fog_tick(s, [0.0], [5.0]).backlog_Q == 0.0
    out = fog_tick(s, [1.0], [0.0], hazards=[0.1, 3.5, 3.0])
    assert out.alerts == (1, 2)


def test_fog_tick_ledgers_and_lyapunov():
    rng = np.random.default_rng(3)
    s = FogState(cpu_shares=np.array([0.3, 0.2]))
    for _ in range(2000):
        s2 = fog_tick(s, rng.uniform(0, 3, 2), rng.uniform(0, 3, 2), rng.uniform(0, 1e6, 3))
        assert s2.backlog_Q >= 0 and s2.energy_E >= s.energy_E
        assert s2.lyapunov_violations >= s.lyapunov_violations
        s = s2
    burst = fog_tick(FogState(backlog_Q=10.0), [0.0], [0.0], coefs=FogCoefficients(lyap_lambda=1.0))
    assert burst.lyapunov_violations == 1


def test_fog_tick_golden_deterministic():
    def run():
        rng = np.random.default_rng(42)
        s = FogState(cpu_shares=np.array([0.4]))
        rec = []
        for _ in range(50):
            s = fog_tick(s, rng.uniform(0, 2, 3), rng.uniform(0, 2, 3), rng.uniform(0, 1e6, 2), hazards=rng.uniform(0, 5, 4))
            rec.append((s.backlog_Q, s.energy_E, s.alerts, s.lyapunov_violations))
        return repr(rec)

    assert run() == run()
