import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, direct_mi
from vehicular_qio.exceptions import ZeroVector
from vehicular_qio.qstate import (
    collapse,
    entangle_neighbors,
    init_superposition,
    joint_encode,
    marginals,
    mi_gradients,
    mutual_information,
    probabilities,
    should_collapse,
)


def test_init_constant_bias_is_uniform():
    psi = init_superposition(np.ones(3), np.zeros((4, 3)), np.full(4, 0.7))
    np.testing.assert_allclose(psi, 0.5, atol=1e-12)


def test_init_three_four():
    from vehicular_qio import qstate

    qstate.ACTIVATIONS["ident"] = lambda x: x
    try:
        psi = init_superposition([1.0], [[3.0], [4.0]], [0.0, 0.0], activation="ident")
    finally:
        del qstate.ACTIVATIONS["ident"]
    np.testing.assert_allclose(psi, [0.6, 0.8], atol=1e-12)


def test_init_random_128_unit_norm(rng):
    psi = init_superposition(rng.normal(size=10), rng.normal(size=(128, 10)), rng.normal(size=128))
    assert abs(np.linalg.norm(psi) - 1) <= 1e-9


def test_init_zero_raises():
    with pytest.raises(ZeroVector):
        init_superposition([1.0], [[0.0]], [0.0], activation="tanh")


def test_init_unknown_activation():
    with pytest.raises(ValueError):
        init_superposition([1.0], [[1.0]], [0.0], activation="relu6")


@pytest.mark.parametrize(
    "psi, expected",
    [
        ([1 / np.sqrt(2), -1 / np.sqrt(2)], [0.5, 0.5]),
        ([0, 0, 1, 0], [0, 0, 1, 0]),
        ([0.6, 0.8], [0.36, 0.64]),
    ],
)
def test_probabilities(psi, expected):
    np.testing.assert_allclose(probabilities(psi), expected, atol=1e-12)


@given(st.integers(2, 256), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_probabilities_sum_to_one(K, seed):
    psi = np.random.default_rng(seed).normal(size=K)
    psi /= np.linalg.norm(psi)
    assert abs(probabilities(psi).sum() - 1) <= 1e-9


def test_joint_encode_examples():
    J = joint_encode([1.0, 0.0], [0.0, 1.0]).values
    np.testing.assert_array_equal(J, [[0, 1], [0, 0]])
    u = np.full(2, 1 / np.sqrt(2))
    np.testing.assert_allclose(joint_encode(u, u).values, 0.5)
    J = joint_encode([0.6, 0.8], [1.0, 0.0]).values
    np.testing.assert_allclose(J[:, 0], [0.6, 0.8])
    np.testing.assert_array_equal(J[:, 1], 0)
    assert abs((J**2).sum() - 1) < 1e-12


def test_marginals_examples(rng):
    c = rng.normal(size=3)
    c /= np.linalg.norm(c)
    m = rng.normal(size=4)
    m /= np.linalg.norm(m)
    tc, tm = marginals(joint_encode(c, m))
    np.testing.assert_allclose(tc, c**2, atol=1e-12)
    np.testing.assert_allclose(tm, m**2, atol=1e-12)
    diag = np.sqrt(np.array([[0.5, 0], [0, 0.5]]))
    tc, tm = marginals(diag)
    np.testing.assert_allclose(tc, [0.5, 0.5])
    np.testing.assert_allclose(tm, [0.5, 0.5])
    tc, tm = marginals(np.array([[0, 0], [0, 1.0]]))
    np.testing.assert_array_equal(tc, [0, 1])
    np.testing.assert_array_equal(tm, [0, 1])


def test_mutual_information_examples(rng):
    c = rng.normal(size=5)
    m = rng.normal(size=3)
    assert abs(mutual_information(joint_encode(c / np.linalg.norm(c), m / np.linalg.norm(m)))) < 1e-12
    diag = np.sqrt(np.array([[0.5, 0], [0, 0.5]]))
    assert mutual_information(diag) == pytest.approx(np.log(2), abs=1e-12)
    assert abs(mutual_information(np.full((2, 2), 0.5))) < 1e-12


def _rational_joints(n):
    vals = [0, 1, 2, 3]
    rng = np.random.default_rng(n)
    for _ in range(60):
        w = rng.choice(vals, size=(n, n)).astype(float)
        if w.sum() == 0:
            continue
        yield w / w.sum()


@pytest.mark.parametrize("n", [2, 3])
def test_mi_nonnegative_and_zero_iff_product(n):
    for p in _rational_joints(n):
        info = mutual_information(np.sqrt(p))
        assert info >= -1e-12
        product = np.allclose(p, np.outer(p.sum(1), p.sum(0)), atol=1e-14)
        assert (abs(info) < 1e-12) == product
        assert info == pytest.approx(direct_mi(np.sqrt(p)), abs=1e-12)


def test_mi_gradients_vanish_on_product(rng):
    c = rng.normal(size=3)
    m = rng.normal(size=4)
    gc, gm = mi_gradients(joint_encode(c / np.linalg.norm(c), m / np.linalg.norm(m)))
    assert np.abs(gc).max() < 1e-8 and np.abs(gm).max() < 1e-8


def test_mi_gradients_one_hot_finite():
    gc, gm = mi_gradients(joint_encode([1.0, 0, 0], [0, 1.0, 0]))
    assert np.all(np.isfinite(gc)) and np.all(np.isfinite(gm))


def _fd_check(c, m, R):
    gc, gm = mi_gradients(joint_encode(c, m, R))
    fc = central_diff(lambda x: direct_mi(np.outer(x, m) + R), c)
    fm = central_diff(lambda x: direct_mi(np.outer(c, x) + R), m)
    np.testing.assert_allclose(gc, fc, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gm, fm, rtol=1e-5, atol=1e-8)


def test_mi_gradients_random_3x3(rng):
    _fd_check(rng.normal(size=3), rng.normal(size=3), 0.5 * rng.normal(size=(3, 3)))


def test_mi_gradients_fd_100_joints_3x4():
    rng = np.random.default_rng(7)
    for _ in range(100):
        _fd_check(rng.uniform(0.2, 1, 3), rng.uniform(0.2, 1, 4), 0.3 * rng.uniform(-1, 1, (3, 4)))


def test_mi_gradients_needs_factored_joint():
    with pytest.raises(TypeError):
        mi_gradients(np.eye(2))


def test_entangle_examples():
    psi = np.array([0.6, 0.8])
    np.testing.assert_array_equal(entangle_neighbors(psi, [], []), psi)
    np.testing.assert_allclose(entangle_neighbors(psi, [np.array([0.3, 0.7])], [0.0]), psi)
    np.testing.assert_allclose(entangle_neighbors([1.0, 0.0], [[1.0, 0.0]], [1.0]), [1.0, 0.0])


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_entangle_zero_coupling_identity(n, seed):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=6)
    psi /= np.linalg.norm(psi)
    out = entangle_neighbors(psi, list(rng.normal(size=(n, 6))), [0.0] * n)
    np.testing.assert_allclose(out, psi, atol=1e-12)


def test_entangle_annihilation_raises():
    with pytest.raises(ZeroVector):
        entangle_neighbors([1.0, 0.0], [[1.0, 0.0]], [-1.0])


def test_entangle_rejects_strong_coupling():
    with pytest.raises(ValueError):
        entangle_neighbors([1.0, 0.0], [[1.0, 0.0]], [1.5])


def test_collapse_examples():
    out, k = collapse([0.6, 0.8])
    assert k == 1 and list(out) == [0, 1]
    out, k = collapse(np.full(4, 0.5))
    assert k == 0 and list(out) == [1, 0, 0, 0]
    assert collapse([0.8, 0.6, 0])[1] == 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_collapse_scale_invariant_and_idempotent(vals, scale):
    psi = np.array(vals)
    one, k = collapse(psi)
    assert collapse(scale * psi)[1] == k
    np.testing.assert_array_equal(collapse(one)[0], one)


def test_should_collapse():
    assert should_collapse(5, 5, 0)
    assert not should_collapse(5, 4, 2)
    assert should_collapse(7, 4, 2)
    with pytest.raises(ValueError):
        should_collapse(1, 0, -1)
