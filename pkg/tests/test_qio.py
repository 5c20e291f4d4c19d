import numpy as np
import pytest

from vehicular_qio.energy import CostBundle, FeasibleSet
from vehicular_qio.exceptions import Diverged
from vehicular_qio.qio import QioConfig, QioResult, QuantumInspiredOptimizer, optimize, step_size_backoff


def run(costs, fs=None, **kw):
    c = np.asarray(costs, dtype=float)
    cfg = QioConfig(K=c.size, **kw)
    return optimize(None, CostBundle({"L": c}, {"L": 1.0}), fs, cfg, psi0=np.ones(c.size))


def test_picks_argmin():
    r = run([3, 1, 2, 4])
    assert r.plan == 1
    assert r.probs[1] >= 0.99


def test_equal_costs_stay_uniform():
    r = run(np.full(6, 2.0))
    assert 0.5 * np.abs(r.probs - 1 / 6).sum() <= 1e-6
    assert r.plan == 0


def test_forbidden_argmin_moves_to_next_best():
    r = run([3, 1, 2, 4], FeasibleSet(np.ones(4), frozenset({1})))
    assert r.plan == 2
    assert r.probs[1] == 0
    assert r.probs[2] >= 0.99


def test_caps_respected():
    r = run([3, 1, 2, 4], FeasibleSet(np.array([1.0, 0.6, 1.0, 1.0])))
    assert r.plan == 1
    assert r.probs[1] <= 0.6 + 1e-9
    assert r.probs[2] == pytest.approx(0.4, abs=1e-3)


@pytest.mark.parametrize("eta, v, expected", [(0.01, 0, 0.01), (0.01, 1, 0.005), (0.01, 30, 1e-8)])
def test_step_size_backoff(eta, v, expected):
    assert step_size_backoff(eta, v) == pytest.approx(expected)


def test_backoff_rejects_nonpositive():
    with pytest.raises(ValueError):
        step_size_backoff(0.0, 1)


def test_unit_norm_every_iteration():
    rng = np.random.default_rng(0)
    r = optimize(None, CostBundle({"L": rng.random(20)}, {"L": 1.0}), None, QioConfig(K=20, max_iters=300),
                 psi0=rng.normal(size=20))
    assert max(abs(n - 1) for n in r.trace.psi_norm) <= 1e-9
    assert len(r.trace) <= 300


def test_final_energy_not_above_initial():
    rng = np.random.default_rng(1)
    for _ in range(10):
        c = rng.permutation(12).astype(float)
        r = optimize(None, CostBundle({"L": c}, {"L": 1.0}), None, QioConfig(K=12), psi0=rng.normal(size=12))
        assert r.converged
        assert r.trace.energy[-1] <= r.trace.energy[0]


def test_deterministic_traces():
    a = run([0.3, 0.1, 0.7, 0.2], max_iters=200, seed=5)
    b = run([0.3, 0.1, 0.7, 0.2], max_iters=200, seed=5)
    for col in ("energy", "temperature", "selected", "eta"):
        assert np.array_equal(getattr(a.trace, col), getattr(b.trace, col))
    assert a.psi.tobytes() == b.psi.tobytes()


def test_tight_smoothness_forces_backoffs():
    # An understated smoothness bound makes the first steps fail the certificate.
    r = run([5.0, 0.0, 3.0], eta=5.0)
    assert r.trace.n_backoffs >= 1
    assert r.trace.eta[-1] < 5.0
    assert r.plan == 1
    accepted = [e for e, a in zip(r.trace.energy, r.trace.accepted) if a]
    assert np.all(np.diff(accepted) <= 1e-12)


def test_multi_objective_weights_on_simplex():
    c = {"L": np.array([1.0, 0.2, 0.5]), "R": np.array([0.1, 0.9, 0.4])}
    r = optimize(None, CostBundle(c, {"L": 0.5, "R": 0.5}), None, QioConfig(K=3), psi0=np.ones(3))
    w = np.array(list(r.weights.values()))
    assert w.sum() == pytest.approx(1.0) and w.min() >= 1e-3 - 1e-12


def test_coupled_joint_reports_mutual_information():
    rng = np.random.default_rng(2)
    R = 0.2 * rng.normal(size=(4, 3))
    r = optimize(None, CostBundle({"L": rng.random(4)}, {"L": 1.0}), None, QioConfig(K=4, L=3, max_iters=200),
                 psi0=np.ones(4), residual=R)
    assert r.trace.coupling[0] > 0
    assert abs(np.linalg.norm(r.psi_m) - 1) < 1e-9


def test_time_varying_costs():
    seq = [np.array([1.0, 0.0, 2.0]), np.array([0.0, 1.0, 2.0])]
    r = optimize(None, lambda t: CostBundle({"L": seq[int(t >= 100)]}, {"L": 1.0}), None,
                 QioConfig(K=3, max_iters=3000), psi0=np.ones(3))
    assert r.plan == 0


def test_diverged_on_non_finite_costs():
    seq = [np.array([1.0, 0.0]), np.array([np.inf, 0.0])]

    class Bundle(CostBundle):
        def __post_init__(self):
            pass

    def provider(t):
        if t == 0:
            return CostBundle({"L": seq[0]}, {"L": 1.0})
        b = Bundle({"L": seq[1]}, {"L": 1.0}, np.zeros(2))
        return b

    with pytest.raises(Diverged):
        optimize(None, provider, None, QioConfig(K=2, max_iters=10), psi0=np.array([1.0, 1.0]))


def test_result_unpacks():
    psi, probs, plan, trace = run([2.0, 1.0], max_iters=50)
    assert isinstance(run([2.0, 1.0], max_iters=5), QioResult)
    assert probs.sum() == pytest.approx(1.0) and plan in (0, 1) and len(trace) <= 50


def test_feature_map_start():
    c = np.array([0.4, 0.1, 0.9])
    r = optimize(np.ones(2), CostBundle({"L": c}, {"L": 1.0}), None, QioConfig(K=3))
    assert r.plan == 1


def test_config_validation():
    with pytest.raises(ValueError):
        QioConfig(eta=0)
    with pytest.raises(ValueError):
        QioConfig(beta=1.0)
    with pytest.raises(ValueError):
        QioConfig(max_iters=0)


def test_estimator():
    X = np.array([[0.9, 0.2], [0.1, 0.3], [0.5, 0.5]])
    est = QuantumInspiredOptimizer(objective_weights=[1.0, 0.0]).fit(X)
    assert est.predict() == 1
    assert est.predict_proba().sum() == pytest.approx(1.0)
    assert est.get_params()["eta"] == 1e-2
    est = QuantumInspiredOptimizer().fit(X[:, :1], forbidden=(1,))
    assert est.predict() == 2
