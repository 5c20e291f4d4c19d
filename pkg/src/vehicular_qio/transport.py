"""Entropic optimal transport between fog nodes and plan atoms."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .exceptions import InvalidMarginals, NotConverged


@dataclass
class TransportProblem:
    cost: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    epsilon: float = 1e-2

    def __post_init__(self):
        self.cost = check_matrix(self.cost, "cost")
        self.mu = _check_marginal(self.mu, "mu", self.cost.shape[0])
        self.nu = _check_marginal(self.nu, "nu", self.cost.shape[1])
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    iterations: int
    marginal_error: float


def _check_marginal(m, name, size):
    try:
        m = check_vector(m, name)
    except ValueError as exc:
        raise InvalidMarginals(str(exc)) from None
    if m.size != size:
        raise InvalidMarginals(f"{name} has length {m.size}, expected {size}")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise InvalidMarginals(f"{name} must be a probability vector")
    return m


NEWTON_AFTER = 1000


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def marginal_error(coupling, mu, nu):
    return max(np.abs(coupling.sum(axis=1) - mu).sum(), np.abs(coupling.sum(axis=0) - nu).sum())


def _sinkhorn_stage(neg, log_mu, log_nu, mu, epsilon, f, g, max_iters, tol, check_every):
    err = np.inf
    it = 0
    while it < max_iters:
        it += 1
        f = epsilon * (log_mu - _lse(neg + g[None, :] / epsilon, axis=1))
        g = epsilon * (log_nu - _lse(neg + f[:, None] / epsilon, axis=0))
        if it % check_every == 0 or it == max_iters:
            P = np.exp(neg + (f[:, None] + g[None, :]) / epsilon)
            # Columns are exact after the g update, so only rows can be off.
            err = np.abs(P.sum(axis=1) - mu).sum()
            if err <= tol:
                break
    return f, g, it


def _dual(D, mu, nu, epsilon, f, g):
    with np.errstate(over="ignore"):
        P = np.exp((f[:, None] + g[None, :] - D) / epsilon)
    return f @ mu + g @ nu - epsilon * P.sum(), P


def _newton_polish(D, mu, nu, epsilon, f, g, tol, max_steps=200):
    """Damped Newton ascent on the smooth dual; quadratic where Sinkhorn crawls."""
    F = D.shape[0]
    obj, P = _dual(D, mu, nu, epsilon, f, g)
    steps = 0
    for steps in range(1, max_steps + 1):
        r = mu - P.sum(axis=1)
        c = nu - P.sum(axis=0)
        if max(np.abs(r).sum(), np.abs(c).sum()) <= tol:
            break
        H = np.block([[np.diag(P.sum(axis=1)), P], [P.T, np.diag(P.sum(axis=0))]]) / epsilon
        # Fix the gauge (last potential) and damp lightly so directions with
        # vanishing curvature still get a (capped) step instead of none.
        A = H[:-1, :-1] + 1e-10 * H.diagonal().max() * np.eye(H.shape[0] - 1)
        d = np.r_[np.linalg.solve(A, np.r_[r, c][:-1]), 0.0]
        # Near-singular Hessians give huge steps; cap any potential move at a few epsilon.
        d *= min(1.0, 5.0 * epsilon / max(np.abs(d).max(), 1e-300))
        slope = float(np.r_[r, c] @ d)
        t = 1.0
        while t > 1e-10:
            f_new, g_new = f + t * d[:F], g + t * d[F:]
            obj_new, P_new = _dual(D, mu, nu, epsilon, f_new, g_new)
            if np.isfinite(obj_new) and obj_new >= obj + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        f, g, obj, P = f_new, g_new, obj_new, P_new
    return f, g, steps


def sinkhorn_potentials(D, mu, nu, epsilon, max_iters=10_000, tol=1e-6, f=None, g=None, check_every=5, scaling=True):
    """Log-domain Sinkhorn; returns ``(coupling, f, g, iterations, error)``.

    ``f`` and ``g`` are the dual potentials; passing the previous solve's
    potentials warm-starts the iteration. With ``scaling`` and a cold start
    the regularizer is lowered geometrically from the cost spread to
    ``epsilon``, warm-starting each stage. A final stage that has not met
    ``tol`` after ``NEWTON_AFTER`` sweeps is finished by Newton steps on the
    dual, which handle nearly degenerate marginals. ``max_iters`` bounds the total over all stages. Raises
    :class:`NotConverged`.
    """
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    cold = f is None and g is None
    f = np.zeros(D.shape[0]) if f is None else np.asarray(f, dtype=float).copy()
    g = np.zeros(D.shape[1]) if g is None else np.asarray(g, dtype=float).copy()
    f[~np.isfinite(f)] = 0.0
    g[~np.isfinite(g)] = 0.0

    schedule = [epsilon]
    spread = float(D.max() - D.min()) if D.size else 0.0
    if scaling and cold and spread > 10 * epsilon:
        n = int(np.ceil(np.log10(spread / epsilon)))
        schedule = list(epsilon * 10.0 ** np.arange(n, 0, -1)) + [epsilon]
    total = 0
    for stage, eps in enumerate(schedule):
        last = stage == len(schedule) - 1
        budget = max_iters - total
        if budget <= 0:
            break
        if not last:
            f, g, it = _sinkhorn_stage(-D / eps, log_mu, log_nu, mu, eps, f, g, budget, max(tol, 1e-3), check_every)
            total += it
            continue
        f, g, it = _sinkhorn_stage(-D / eps, log_mu, log_nu, mu, eps, f, g, min(budget, NEWTON_AFTER), tol,
                                   check_every)
        total += it
        if marginal_error(np.exp((f[:, None] + g[None, :] - D) / eps), mu, nu) > tol and total < max_iters:
            f, g, it = _newton_polish(D, mu, nu, eps, f, g, tol)
            total += it
        if total < max_iters:
            f, g, it = _sinkhorn_stage(-D / eps, log_mu, log_nu, mu, eps, f, g, max_iters - total, tol, check_every)
            total += it
    P = np.exp(-D / epsilon + (f[:, None] + g[None, :]) / epsilon)
    err = marginal_error(P, mu, nu)
    if err > tol:
        raise NotConverged(total, err)
    return P, f, g, total, err


def sinkhorn(problem, max_iters=10_000, tol=1e-6):
    P, _, _, it, err = sinkhorn_potentials(problem.cost, problem.mu, problem.nu, problem.epsilon, max_iters, tol)
    return TransportPlan(P, it, float(err))


def transport_objective(plan, problem):
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    pos = P > 0
    entropy_term = np.sum(P[pos] * np.log(P[pos]))
    return float(np.sum(P * problem.cost) + problem.epsilon * entropy_term)


def assign_greedy(problem):
    """Fill cells in ascending cost order, each as full as the marginals allow."""
    D = problem.cost
    row = problem.mu.copy()
    col = problem.nu.copy()
    P = np.zeros_like(D)
    for flat in np.argsort(D, axis=None, kind="stable"):
        i, j = divmod(int(flat), D.shape[1])
        amount = min(row[i], col[j])
        if amount > 0:
            P[i, j] = amount
            row[i] -= amount
            col[j] -= amount
    return TransportPlan(P, 1, float(marginal_error(P, problem.mu, problem.nu)))


class SinkhornTransport(BaseEstimator):
    """Entropic OT solver with optional warm starts across calls.

    Parameters
    ----------
    epsilon : float
        Entropic regularizer.
    max_iters : int
    tol : float
        L1 tolerance on each marginal.
    warm_start : bool
        Reuse the dual potentials of the previous ``fit`` when shapes match.
    method : {"sinkhorn", "greedy"}
    """

    def __init__(self, epsilon=1e-2, max_iters=10_000, tol=1e-6, warm_start=False, method="sinkhorn"):
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.tol = tol
        self.warm_start = warm_start
        self.method = method

    def fit(self, cost, mu=None, nu=None):
        cost = check_matrix(cost, "cost")
        F, K = cost.shape
        mu = np.full(F, 1.0 / F) if mu is None else mu
        nu = np.full(K, 1.0 / K) if nu is None else nu
        problem = TransportProblem(cost, mu, nu, self.epsilon)
        if self.method == "greedy":
            plan = assign_greedy(problem)
            self.coupling_ = plan.coupling
            self.n_iter_ = plan.iterations
            self.marginal_error_ = plan.marginal_error
            self.objective_ = transport_objective(plan, problem)
            return self
        if self.method != "sinkhorn":
            raise ValueError(f"unknown method {self.method!r}")
        f = g = None
        if self.warm_start and getattr(self, "potentials_", None) is not None:
            f0, g0 = self.potentials_
            if f0.shape == (F,) and g0.shape == (K,):
                f, g = f0, g0
        P, f, g, it, err = sinkhorn_potentials(
            problem.cost, problem.mu, problem.nu, self.epsilon, self.max_iters, self.tol, f, g
        )
        self.coupling_ = P
        self.potentials_ = (f, g)
        self.n_iter_ = it
        self.marginal_error_ = float(err)
        self.objective_ = transport_objective(P, problem)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "coupling_")
        return self.coupling_

    def fit_transform(self, cost, mu=None, nu=None):
        return self.fit(cost, mu, nu).coupling_
