"""Fog-node aggregation, hazard scoring, resource allocation and accounting."""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import as_generator, check_matrix, check_vector
from .exceptions import DimMismatch, EmptyCandidates, Overload
from .vehicle import select_phy_profile

RIDGE = 1e-3
SHARE_FLOOR = 1e-9


class NonConvergentWarning(RuntimeWarning):
    pass


@dataclass
class TaskDescriptor:
    """A task competing for fog CPU and cache.

    ``work`` scales the latency term ``work / share``; ``energy`` and
    ``storage`` are linear cost rates on the CPU share and cache fraction.
    """

    priority: float
    work: float = 1.0
    energy: float = 0.0
    storage: float = 0.0

    def __post_init__(self):
        if not self.priority > 0:
            raise ValueError("task priority must be positive")
        if self.work < 0:
            raise ValueError("task work must be nonnegative")


@dataclass
class FogState:
    backlog_Q: float = 0.0
    cpu_shares: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cache_frac: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dual_lambda: float = 0.0
    energy_E: float = 0.0
    C_cpu: float = 1.0
    C_mem: float = 1.0
    alerts: tuple = ()
    lyapunov_violations: int = 0

    def __post_init__(self):
        if self.C_cpu <= 0 or self.C_mem <= 0:
            raise ValueError("capacities must be positive")
        if self.backlog_Q < 0 or self.dual_lambda < 0 or self.energy_E < 0:
            raise ValueError("backlog, dual and energy must be nonnegative")
        self.cpu_shares = np.asarray(self.cpu_shares, dtype=float)
        self.cache_frac = np.asarray(self.cache_frac, dtype=float)


@dataclass
class FogCoefficients:
    eta_cpu: float = 1e-3
    eta_tx: float = 1e-9
    lyap_lambda: float = 0.01
    lyap_chi: float = 1.0
    alert_threshold: float = 3.0


def aggregate(inputs, infra=None):
    """``sum_i W_i y_i + U ybar``; ``inputs`` is a list of ``(W, y)`` pairs."""
    z = None
    for W, y in inputs:
        W = check_matrix(W, "W")
        y = check_vector(y, "y")
        if W.shape[1] != y.size:
            raise DimMismatch(f"weight of shape {W.shape} cannot act on a vector of length {y.size}")
        term = W @ y
        if z is not None and term.size != z.size:
            raise DimMismatch("aggregated terms differ in length")
        z = term if z is None else z + term
    if infra is not None:
        U, ybar = infra
        U = check_matrix(U, "U")
        ybar = check_vector(ybar, "ybar")
        if U.shape[1] != ybar.size or (z is not None and U.shape[0] != z.size):
            raise DimMismatch("infrastructure term has inconsistent dimensions")
        z = U @ ybar if z is None else z + U @ ybar
    if z is None:
        raise DimMismatch("nothing to aggregate")
    return z


def sketch(z, P, Omega, b):
    return np.asarray(P, dtype=float) @ np.tanh(np.asarray(Omega, dtype=float) @ np.asarray(z, dtype=float) + b)


def privatize(s, sigma, seed):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    s = np.asarray(s, dtype=float)
    if sigma == 0:
        return s.copy()
    return s + sigma * as_generator(seed).standard_normal(s.shape)


def softplus(a):
    a = np.asarray(a, dtype=float)
    return np.where(a > 30, a, np.log1p(np.exp(np.minimum(a, 30))))


def hazard_score(z, D, alpha, beta):
    arg = alpha * np.abs(np.asarray(D, dtype=float) @ np.asarray(z, dtype=float)).sum() + beta
    return float(softplus(arg))


def route_scores(candidates, weights):
    c = np.asarray(candidates, dtype=float).reshape(-1, 3)
    if np.any(c[:, 2] <= 0):
        raise ValueError("bandwidth must be positive")
    w1, w2, w3 = weights
    return w1 * c[:, 0] + w2 * c[:, 1] + w3 / c[:, 2]


def pick_route(candidates, weights, hazard, hazard_threshold):
    """Lowest-score detour among ``(travel_time, congestion, bandwidth)`` rows,
    or ``None`` when the hazard gate fails."""
    if len(candidates) == 0:
        raise EmptyCandidates("no route candidates")
    if hazard > hazard_threshold:
        return None
    return int(np.argmin(route_scores(candidates, weights)))


def schedule_subchannel(rates_per_channel):
    return select_phy_profile(rates_per_channel)


def _project_capped(v, cap, floor=0.0):
    """Euclidean projection onto ``{x >= floor, sum x <= cap}``."""
    x = np.maximum(v, floor)
    if x.sum() <= cap:
        return x
    # Sort-based projection onto the shifted simplex sum(y) = cap - n * floor.
    y = np.asarray(v, dtype=float) - floor
    budget = cap - floor * y.size
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - budget
    active = np.flatnonzero(u - css / np.arange(1, y.size + 1) > 0)
    # Huge entries can cancel the test for the top entry; it is always active.
    k = active[-1] if active.size else 0
    tau = css[k] / (k + 1)
    x = np.maximum(y - tau, 0.0)
    if x.sum() > budget:
        x *= budget / x.sum()
    return x + floor


def allocation_objective(tasks, shares, cache, weights=(1.0, 1.0, 1.0), ridge=RIDGE):
    a, b, g = weights
    total = 0.0
    for k, t in enumerate(tasks):
        total += t.priority * (a * t.work / max(shares[k], SHARE_FLOOR) + b * t.energy * shares[k] + g * t.storage * cache[k])
    return total + 0.5 * ridge * (float(shares @ shares) + float(cache @ cache))


def allocate(tasks, state, weights=(1.0, 1.0, 1.0), eta=1e-2, reg="ridge", rounds=100, ridge=RIDGE):
    """Proximal-gradient / dual-ascent CPU and cache allocation.

    Parameters
    ----------
    tasks : list of TaskDescriptor
    state : FogState
    weights : tuple
        Latency, energy and storage weights.
    eta : float
        Primal and dual step size.
    reg : {"ridge", "none"}
        Regularizer handled by its proximal map.
    rounds : int

    Returns
    -------
    FogState
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if reg not in ("ridge", "none"):
        raise ValueError(f"unknown regularizer {reg!r}")
    r = ridge if reg == "ridge" else 0.0
    n = len(tasks)
    lam = float(state.dual_lambda)
    if n == 0:
        for _ in range(rounds):
            lam = max(0.0, lam - eta * state.C_cpu)
        return replace(state, dual_lambda=lam)
    a, b, g = weights
    omega = np.array([t.priority for t in tasks])
    work = np.array([t.work for t in tasks])
    en = np.array([t.energy for t in tasks])
    st = np.array([t.storage for t in tasks])
    pi = state.cpu_shares.copy() if state.cpu_shares.size == n else np.full(n, state.C_cpu / (2 * n))
    kappa = state.cache_frac.copy() if state.cache_frac.size == n else np.zeros(n)
    pi = np.maximum(pi, SHARE_FLOOR)
    for _ in range(rounds):
        grad_pi = omega * (-a * work / pi**2 + b * en) + lam
        grad_kappa = omega * g * st
        pi = (pi - eta * grad_pi) / (1.0 + eta * r)
        kappa = (kappa - eta * grad_kappa) / (1.0 + eta * r)
        lam = max(0.0, lam + eta * (pi.sum() - state.C_cpu))
        pi = _project_capped(pi, state.C_cpu, SHARE_FLOOR)
        kappa = _project_capped(np.clip(kappa, 0.0, 1.0), state.C_mem)
    violation = max(pi.sum() - state.C_cpu, kappa.sum() - state.C_mem, 0.0)
    if violation > 1e-6:
        warnings.warn(f"allocation constraint violation {violation:.2e}", NonConvergentWarning, stacklevel=2)
    return replace(state, cpu_shares=pi, cache_frac=kappa, dual_lambda=lam)


def fog_delay(Z, mu, Lambda, Delta):
    """Queueing delay ``Z/(mu - Lambda) + Delta``; works elementwise on arrays."""
    mu = np.asarray(mu, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    if np.any(mu <= Lambda):
        raise Overload("service rate must exceed the arrival rate")
    out = Z / (mu - Lambda) + Delta
    return float(out) if np.ndim(out) == 0 else out


def cache_hit(nu, request_intensity):
    if nu < 0 or request_intensity < 0:
        raise ValueError("inputs must be nonnegative")
    return float(-np.expm1(-nu * request_intensity))


def backlog_step(Q, arrivals, services):
    return np.maximum(0.0, Q + arrivals - services)


def fog_tick(state, arrivals, services, tx_rates=(), coefs=None, hazards=()):
    """Advance the backlog and energy ledgers by one tick.

    Vehicles whose hazard reaches the alert threshold are listed in
    ``alerts``; a failed Lyapunov decrement on ``V = Q^2 / 2`` is counted.
    """
    coefs = FogCoefficients() if coefs is None else coefs
    A = float(np.sum(arrivals))
    S = float(np.sum(services))
    if A < 0 or S < 0:
        raise ValueError("arrivals and services must be nonnegative")
    Q = state.backlog_Q
    Q_new = float(backlog_step(Q, A, S))
    E_new = state.energy_E + coefs.eta_cpu * float(np.sum(state.cpu_shares)) + coefs.eta_tx * float(np.sum(tx_rates))
    V_prev = 0.5 * Q * Q
    V_next = 0.5 * Q_new * Q_new
    ok = V_next - V_prev <= -coefs.lyap_lambda * Q * Q + coefs.lyap_chi * A * A + 1e-12
    alerts = tuple(int(i) for i in np.flatnonzero(np.asarray(hazards, dtype=float) >= coefs.alert_threshold))
    return replace(
        state,
        backlog_Q=Q_new,
        energy_E=E_new,
        alerts=alerts,
        lyapunov_violations=state.lyapunov_violations + (0 if ok else 1),
    )
