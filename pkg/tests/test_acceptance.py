"""End-to-end acceptance checks.

Each test records a one-line verdict that is printed in the terminal
summary. They run after every other test module so the trace and
simulator monitors in conftest cover the whole suite.
"""

import time

import numpy as np
import pytest
from oracles import lp_vertex_optimum, simplex

from conftest import central_diff, direct_mi
from vehicular_qio.cloud import koopman_fit, model_update
from vehicular_qio.energy import CostBundle, energy, energy_gradient
from vehicular_qio.qio import QioConfig, optimize
from vehicular_qio.qstate import joint_encode, mi_gradients
from vehicular_qio.sim import SCENARIOS, VARIANTS, scenario, simulate
from vehicular_qio.sim.ablation import ablate
from vehicular_qio.sim.output import report_to_json, series_to_csv
from vehicular_qio.transport import TransportProblem, marginal_error, sinkhorn
from vehicular_qio.vehicle import consensus_step, contraction_factor, disagreement, metropolis_weights


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def test_criterion_02_qio_finds_argmin(acceptance):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 1.0
    for i in range(50):
        K = int(rng.integers(2, 65))
        c = rng.permutation(K).astype(float)
        r = optimize(None, CostBundle({"L": c}, {"L": 1.0}), None, QioConfig(K=K, max_iters=5000, seed=i),
                     psi0=np.ones(K))
        worst = min(worst, float(r.probs[np.argmin(c)]))
    elapsed = time.perf_counter() - t0
    ok = worst >= 0.99 and elapsed < 5.0
    acceptance(2, ok, f"worst argmin mass {worst:.6f} over 50 instances in {elapsed:.2f} s")
    assert ok


def _longest_failure_run(accepted):
    longest = run = 0
    for a in accepted:
        run = 0 if a else run + 1
        longest = max(longest, run)
    return longest


def test_criterion_04_descent_certificate(acceptance):
    rng = np.random.default_rng(4)
    bad = 0
    total_backoffs = 0
    for i in range(100):
        K = int(rng.integers(2, 40))
        H = rng.uniform(0.0, 3.0, K)
        # large initial steps force the certificate to back off
        eta = float(rng.choice([1e-2, 0.3, 2.0, 8.0]))
        r = optimize(None, CostBundle({"L": H}, {"L": 1.0}), None, QioConfig(K=K, eta=eta, max_iters=400, seed=i),
                     psi0=rng.normal(size=K))
        E = np.array([e for e, a in zip(r.trace.energy, r.trace.accepted) if a])
        total_backoffs += r.trace.n_backoffs
        if _longest_failure_run(r.trace.accepted) > 10 or np.any(np.diff(E) > 1e-15 * np.maximum(1.0, np.abs(E[:-1]))):
            bad += 1
    acceptance(4, bad == 0, f"{bad} counterexamples in 100 instances ({total_backoffs} backoffs in total)")
    assert bad == 0


def test_criterion_05_sinkhorn(acceptance):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_marg = 0.0
    for _ in range(200):
        F, K = rng.integers(1, 17, size=2)
        D = rng.uniform(0.0, 1.0, (F, K))
        mu, nu = simplex(rng, F), simplex(rng, K)
        plan = sinkhorn(TransportProblem(D, mu, nu, float(rng.choice([1e-2, 5e-2, 1e-1]))))
        worst_marg = max(worst_marg, marginal_error(plan.coupling, mu, nu))
    worst_gap = 0.0
    for _ in range(20):
        D = rng.uniform(0.0, 1.0, (3, 3))
        mu, nu = simplex(rng, 3), simplex(rng, 3)
        plan = sinkhorn(TransportProblem(D, mu, nu, 1e-3))
        lp = lp_vertex_optimum(D, mu, nu)
        worst_gap = max(worst_gap, abs(float(np.sum(plan.coupling * D)) - lp) / lp)
    elapsed = time.perf_counter() - t0
    ok = worst_marg <= 1e-6 and worst_gap <= 0.01 and elapsed < 10.0
    acceptance(5, ok, f"marginal L1 {worst_marg:.2e}, LP gap {100 * worst_gap:.4f}%, {elapsed:.2f} s")
    assert ok


def test_criterion_06_gradients(acceptance):
    rng = np.random.default_rng(6)
    worst_e = 0.0
    for _ in range(100):
        K = int(rng.integers(2, 32))
        psi, H = rng.normal(size=K), rng.uniform(0.0, 5.0, K)
        worst_e = max(worst_e, rel_err(energy_gradient(psi, H), central_diff(lambda x: energy(x, H), psi)))
    worst_mi = 0.0
    for _ in range(100):
        Kc, Km = rng.integers(2, 6, size=2)
        c, m = rng.normal(size=Kc), rng.normal(size=Km)
        R = 0.3 * rng.normal(size=(Kc, Km))
        gc, gm = mi_gradients(joint_encode(c, m, R))
        fc = central_diff(lambda x: direct_mi(np.outer(x, m) + R), c)
        fm = central_diff(lambda x: direct_mi(np.outer(c, x) + R), m)
        worst_mi = max(worst_mi, rel_err(np.r_[gc, gm], np.r_[fc, fm]))
    ok = worst_e <= 1e-5 and worst_mi <= 1e-5
    acceptance(6, ok, f"worst relative error: energy {worst_e:.2e}, mutual information {worst_mi:.2e}")
    assert ok


def test_criterion_07_koopman(acceptance):
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(10):
        d = int(rng.integers(1, 9))
        A = rng.normal(size=(d, d)) / np.sqrt(d)
        X = rng.normal(size=(5 * d + 10, d))
        errs.append(np.linalg.norm(koopman_fit((X, X @ A.T), 1e-10) - A))
    n_ok = sum(e < 1e-6 for e in errs)
    acceptance(7, n_ok == 10, f"{n_ok}/10 systems recovered, worst Frobenius error {max(errs):.2e}")
    assert n_ok == 10


def test_criterion_08_prox(acceptance):
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(100):
        theta, grad = rng.normal(scale=2.0, size=2)
        eta, beta = rng.uniform(0.05, 1.0), rng.uniform(0.0, 2.0)
        got = float(model_update(theta, grad, eta, beta, 0.5)[0])
        y, t = theta - eta * grad, eta * beta
        grid = np.linspace(min(y, 0.0) - 1.0, max(y, 0.0) + 1.0, 1001)
        best = grid[np.argmin(0.5 * (grid - y) ** 2 + t * np.abs(grid))]
        bad += abs(got - best) > grid[1] - grid[0]
    acceptance(8, bad == 0, f"{100 - bad}/100 cases within grid resolution")
    assert bad == 0


def _random_connected_graph(rng, n):
    A = np.zeros((n, n), dtype=bool)
    order = rng.permutation(n)
    for k in range(1, n):
        j = order[rng.integers(0, k)]
        A[order[k], j] = A[j, order[k]] = True
    extra = rng.random((n, n)) < rng.uniform(0.0, 0.3)
    A |= extra | extra.T
    np.fill_diagonal(A, False)
    return A


def test_criterion_09_consensus(acceptance):
    rng = np.random.default_rng(9)
    non_monotone = 0
    worst_gap = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 21))
        W = metropolis_weights(_random_connected_graph(rng, n))
        X = rng.normal(size=(n, 3))
        d = [disagreement(X)]
        while d[-1] > 1e-16 * d[0] and len(d) < 5000:
            X = consensus_step(X, W)
            d.append(disagreement(X))
        non_monotone += int(np.any(np.diff(d) >= 0))
        # spectral value: largest eigenvalue magnitude off the consensus mode, squared
        lam, V = np.linalg.eigh(W)
        k = np.argmax(np.abs(V.T @ np.ones(n)))
        rest = np.delete(np.arange(n), k)
        slow = rest[np.argmax(np.abs(lam[rest]))]
        spectral = lam[slow] ** 2
        x = V[:, slow : slow + 1]
        measured = disagreement(consensus_step(x, W)) / disagreement(x)
        worst_gap = max(worst_gap, abs(measured - spectral), abs(contraction_factor(W) - spectral))
    ok = non_monotone == 0 and worst_gap <= 1e-9
    acceptance(9, ok, f"{non_monotone} non-monotone runs, worst factor gap {worst_gap:.2e} over 50 graphs")
    assert ok


def test_criterion_12_outage_stress(acceptance):
    lat = {"S1": [], "S4": []}
    pdr = {"S1": [], "S4": []}
    for seed in range(10):
        for name in lat:
            r = simulate(scenario(name, seed=seed))
            lat[name].append(r.mean_latency_ms)
            pdr[name].append(r.pdr_pct)
    l1, l4 = np.mean(lat["S1"]), np.mean(lat["S4"])
    p1, p4 = np.mean(pdr["S1"]), np.mean(pdr["S4"])
    ok = l4 >= l1 and p4 <= p1
    acceptance(12, ok, f"latency S1 {l1:.2f} ms vs S4 {l4:.2f} ms, PDR S1 {p1:.2f}% vs S4 {p4:.2f}%")
    assert ok


def test_criterion_11_ablation_ordering(acceptance):
    t0 = time.perf_counter()
    table = ablate(scenario("S1"), VARIANTS, 30, scenarios=SCENARIOS)
    elapsed = time.perf_counter() - t0
    means = {v: float(np.nanmean(table.pooled(v))) for v in VARIANTS}
    others = [v for v in VARIANTS if v != "full"]
    tests = {v: table.sign_test("full", v) for v in others}
    ordered = all(means["full"] < means[v] for v in others)
    worst = max(others, key=means.get) == "no_proj"
    significant = all(p < 0.05 for _, _, p in tests.values())
    ok = ordered and worst and significant and elapsed < 1800
    detail = ", ".join(f"{v} {means[v]:.2f}" for v in VARIANTS)
    pvals = ", ".join(f"{v} p={p:.1e}" for v, (_, _, p) in tests.items())
    acceptance(11, ok, f"pooled mean latency ms: {detail}; sign tests: {pvals}; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.parametrize("name", SCENARIOS)
def test_criterion_10_determinism(name, acceptance):
    cfg = scenario(name, seed=2024)
    a, b = simulate(cfg), simulate(cfg)
    same = report_to_json(a) == report_to_json(b) and series_to_csv(a) == series_to_csv(b)
    _DETERMINISM[name] = same and a.conserved and b.conserved
    assert same


_DETERMINISM = {}


def test_criterion_10_conservation(monitor, acceptance):
    identical = sum(_DETERMINISM.values())
    ok = monitor.unconserved == 0 and monitor.runs > 0 and identical == len(SCENARIOS)
    acceptance(10, ok, f"{monitor.runs - monitor.unconserved}/{monitor.runs} simulator runs conserve packets; "
                       f"{identical}/{len(SCENARIOS)} scenarios byte-identical on rerun")
    assert ok


def test_criterion_03_sphere_invariant(monitor, acceptance):
    ok = monitor.traces > 0 and monitor.max_norm_dev <= 1e-9
    acceptance(3, ok, f"max | ||psi|| - 1 | = {monitor.max_norm_dev:.2e} over {monitor.traces} optimizer traces")
    assert ok
