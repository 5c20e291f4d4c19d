import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff
from vehicular_qio.energy import (
    CostBundle,
    FeasibleSet,
    assemble_cost,
    descent_certificate,
    energy,
    energy_gradient,
    minmax_normalize,
    penalized_operator,
    project_feasible,
    tchebycheff,
)
from vehicular_qio.exceptions import InfeasibleSimplex, InvalidWeights, LengthMismatch, NoFeasiblePoint


def test_assemble_single_objective():
    c = np.array([3.0, 1.0, 2.0])
    np.testing.assert_array_equal(assemble_cost(CostBundle({"L": c}, {"L": 1.0})), c)


def test_assemble_convex_weights_on_unit_costs():
    ones = np.ones(5)
    b = CostBundle({q: ones for q in ("L", "R", "E", "Th")}, {"L": 0.4, "R": 0.3, "E": 0.2, "Th": 0.1})
    np.testing.assert_allclose(assemble_cost(b), 1.0)


def test_assemble_hand_sum():
    b = CostBundle({"L": [1.0, 0.0], "R": [0.0, 2.0]}, {"L": 1.0, "R": 1.0})
    np.testing.assert_array_equal(assemble_cost(b), [1.0, 2.0])


def test_bundle_errors():
    with pytest.raises(LengthMismatch):
        CostBundle({"L": [1.0, 2.0], "R": [1.0]}, {"L": 1.0})
    with pytest.raises(InvalidWeights):
        CostBundle({"L": [1.0]}, {"L": 0.0})
    with pytest.raises(InvalidWeights):
        CostBundle({"L": [1.0]}, {"L": -1.0})


def test_penalized_operator_examples():
    h = np.array([1.0, 1.0])
    np.testing.assert_array_equal(penalized_operator(h, [-1.0, -0.5], 3.0), h)
    np.testing.assert_allclose(penalized_operator(h, [-1.0, 0.5], 2.0), [1.0, 1.5])
    np.testing.assert_array_equal(penalized_operator(h, [4.0, 5.0], 0.0), h)


@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 2**32 - 1))
def test_penalized_operator_monotone_in_rho(r1, r2, seed):
    rng = np.random.default_rng(seed)
    h, g = rng.normal(size=6), rng.normal(size=6)
    lo, hi = sorted((r1, r2))
    assert np.all(penalized_operator(h, g, hi) >= penalized_operator(h, g, lo))


def test_energy_examples():
    assert energy([1.0, 0.0], [1.0, 2.0]) == 1.0
    u = np.full(2, 1 / np.sqrt(2))
    assert energy(u, [1.0, 2.0]) == pytest.approx(1.5)
    psi = np.random.default_rng(3).normal(size=7)
    psi /= np.linalg.norm(psi)
    assert energy(psi, np.full(7, 2.5)) == pytest.approx(2.5)


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_energy_sign_flip_and_bounds(K, seed):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=K)
    psi /= np.linalg.norm(psi)
    H = rng.normal(size=K)
    flips = rng.choice([-1.0, 1.0], size=K)
    assert energy(flips * psi, H) == pytest.approx(energy(psi, H), abs=1e-12)
    assert H.min() - 1e-12 <= energy(psi, H) <= H.max() + 1e-12


def test_energy_gradient_examples():
    np.testing.assert_array_equal(energy_gradient([1.0, 0.0], [3.0, 5.0]), [6.0, 0.0])
    np.testing.assert_array_equal(energy_gradient([0.6, 0.8], [0.0, 0.0]), [0.0, 0.0])


def test_energy_gradient_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(200):
        K = int(rng.integers(2, 16))
        psi, H = rng.normal(size=K), rng.uniform(0.5, 3, size=K)
        fd = central_diff(lambda x: energy(x, H), psi)
        g = energy_gradient(psi, H)
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-6


def test_tchebycheff_examples():
    v, a = tchebycheff([2.0, 2.0])
    assert v == pytest.approx(1.0)
    np.testing.assert_allclose(a, [0.5, 0.5])
    v, _ = tchebycheff([0.0, 0.0])
    assert v == 0.0
    v, a = tchebycheff([4.0, 0.0], alpha_min=1e-3)
    assert v == pytest.approx(0.004)
    np.testing.assert_allclose(a, [0.001, 0.999])


def test_tchebycheff_dict_and_infeasible():
    v, a = tchebycheff({"L": 3.0, "R": 1.0}, {"L": 1.0, "R": 0.0})
    assert v == pytest.approx(2 / 3)
    with pytest.raises(InfeasibleSimplex):
        tchebycheff([1.0, 1.0, 1.0], alpha_min=0.4)
    with pytest.raises(ValueError):
        tchebycheff([0.0, 1.0], utopia=[1.0, 0.0])


def _grid_min(d, alpha_min, n=10_000):
    """Brute force over a simplex grid with about n points."""
    if d.size == 2:
        a = np.linspace(alpha_min, 1 - alpha_min, n)
        A = np.stack([a, 1 - a], axis=1)
    else:
        m = int(np.sqrt(2 * n))
        a, b = np.meshgrid(np.linspace(0, 1, m), np.linspace(0, 1, m))
        A = np.stack([a.ravel(), b.ravel(), 1 - a.ravel() - b.ravel()], axis=1)
        A = A[(A >= alpha_min).all(axis=1)]
    return (A * d).max(axis=1).min(), 1.0 / (n if d.size == 2 else int(np.sqrt(2 * n)))


@pytest.mark.parametrize("Q", [2, 3])
def test_tchebycheff_matches_grid(Q):
    rng = np.random.default_rng(Q)
    for _ in range(50):
        d = rng.uniform(0, 5, size=Q)
        v, a = tchebycheff(d, alpha_min=1e-3)
        g, res = _grid_min(d, 1e-3)
        assert v <= g + 1e-12
        assert g - v <= d.max() * 2 * res
        assert a.sum() == pytest.approx(1.0) and a.min() >= 1e-3 - 1e-12
        assert np.max(a * d) == pytest.approx(v, rel=1e-9, abs=1e-12)


def test_project_identity_without_constraints(rng):
    psi = rng.normal(size=6)
    psi /= np.linalg.norm(psi)
    np.testing.assert_allclose(project_feasible(psi, FeasibleSet.unconstrained(6)), psi, atol=1e-12)


def test_project_forbidden_forces_remaining_plan():
    out = project_feasible([0.6, 0.8], FeasibleSet(np.ones(2), frozenset({1})))
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_project_feasible_point_unchanged():
    psi = np.full(3, 1 / np.sqrt(3))
    np.testing.assert_allclose(project_feasible(psi, FeasibleSet(np.full(3, 0.5))), psi, atol=1e-12)


def test_feasible_set_errors():
    with pytest.raises(NoFeasiblePoint):
        FeasibleSet(np.ones(2), frozenset({0, 1}))
    with pytest.raises(NoFeasiblePoint):
        FeasibleSet(np.full(3, 0.2))
    with pytest.raises(NoFeasiblePoint):
        project_feasible([1.0, 0.0], FeasibleSet(np.ones(2), frozenset({0})))


def test_project_properties_1000_instances():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        K = int(rng.integers(2, 65))
        caps = rng.uniform(1.5 / K, 1.0, size=K)
        forbidden = frozenset(rng.choice(K, size=int(rng.integers(0, K // 3 + 1)), replace=False).tolist())
        allowed = np.ones(K, bool)
        allowed[list(forbidden)] = False
        if caps[allowed].sum() < 1:
            continue
        fs = FeasibleSet(caps, forbidden)
        psi = rng.normal(size=K)
        psi[allowed] += 0.1
        out = project_feasible(psi, fs)
        p = out**2
        assert abs(np.linalg.norm(out) - 1) <= 1e-9
        assert np.all(p[~allowed] == 0)
        assert np.all(p <= caps + 1e-9)
        np.testing.assert_allclose(project_feasible(out, fs), out, atol=1e-9)


def test_descent_certificate_examples():
    assert descent_certificate(1.0, 1.0, 0.0, 0.1, 2.0)
    L, g2 = 4.0, 3.0
    eta = 1 / (2 * L)
    assert descent_certificate(5.0 - eta * g2 / 2, 5.0, g2, eta, L)
    assert not descent_certificate(1.1, 1.0, 1.0, 1e-3, 1.0)
    with pytest.raises(ValueError):
        descent_certificate(0, 0, 0, 0.0, 1.0)


def test_minmax_normalize():
    out = minmax_normalize({"L": [2.0, 4.0, 3.0], "R": [1.0, 1.0, 1.0]})
    np.testing.assert_allclose(out["L"], [0, 1, 0.5])
    np.testing.assert_array_equal(out["R"], 0)
