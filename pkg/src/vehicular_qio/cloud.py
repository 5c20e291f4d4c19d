"""Cloud coordination: fusion, lifted forecasting, plan search and dispatch."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_generator, check_matrix, check_vector
from .anneal import TemperatureState, smoothed_temperature, soft_policy
from .energy import CostBundle, FeasibleSet
from .exceptions import DimMismatch, NoFeasiblePoint, NotConverged, SingularSystem, TooFewSamples
from .qio import QioConfig, optimize
from .transport import SinkhornTransport

OBJECTIVES = ("L", "R", "E", "Th")
DEFAULT_WEIGHTS = {"L": 0.4, "R": 0.3, "E": 0.2, "Th": 0.1}


def fuse(summaries):
    """``sum_f A_f s_f`` over ``(A_f, s_f)`` pairs."""
    Z = None
    for A, s in summaries:
        A = check_matrix(A, "A")
        s = check_vector(s, "s")
        if A.shape[1] != s.size:
            raise DimMismatch(f"matrix of shape {A.shape} cannot act on a summary of length {s.size}")
        term = A @ s
        if Z is not None and Z.size != term.size:
            raise DimMismatch("fused terms differ in length")
        Z = term if Z is None else Z + term
    if Z is None:
        raise DimMismatch("no summaries to fuse")
    return Z


def confidence_weights(variances, latencies, kappas=(1.0, 1.0)):
    var = check_vector(variances, "variances")
    lat = check_vector(latencies, "latencies")
    if var.size != lat.size:
        raise DimMismatch("variances and latencies differ in length")
    k1, k2 = kappas
    return softmax(-k1 * var - k2 * lat)


def lift(z):
    """Lifted features: the normalized shares plus a constant."""
    z = np.maximum(np.asarray(z, dtype=float), 0.0)
    total = z.sum()
    shares = z / total if total > 0 else np.full(z.size, 1.0 / z.size)
    return np.append(shares, 1.0)


def koopman_fit(feature_pairs, ridge_lambda=1e-6):
    """Ridge estimate ``K = (sum x' x^T)(sum x x^T + lambda I)^{-1}``.

    ``feature_pairs`` is a sequence of ``(x_t, x_next)`` pairs or a tuple of
    two arrays with one sample per row.
    """
    if isinstance(feature_pairs, tuple) and len(feature_pairs) == 2 and np.ndim(feature_pairs[0]) == 2:
        X, Y = (np.asarray(a, dtype=float) for a in feature_pairs)
    else:
        pairs = list(feature_pairs)
        if not pairs:
            raise SingularSystem("no feature pairs")
        X = np.array([np.atleast_1d(p[0]) for p in pairs], dtype=float)
        Y = np.array([np.atleast_1d(p[1]) for p in pairs], dtype=float)
    if X.shape != Y.shape:
        raise DimMismatch("feature pairs differ in dimension")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    d = X.shape[1]
    G = X.T @ X + ridge_lambda * np.eye(d)
    C = Y.T @ X
    if ridge_lambda == 0 and np.linalg.matrix_rank(G) < d:
        raise SingularSystem("feature covariance is rank deficient")
    try:
        # K G = C  <=>  G^T K^T = C^T, and G is symmetric.
        return np.linalg.solve(G, C.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None


class KoopmanRegressor(RegressorMixin, BaseEstimator):
    """Linear one-step predictor ``x_next = K x`` fit by ridge regression.

    Parameters
    ----------
    ridge : float
        Tikhonov regularizer.
    """

    def __init__(self, ridge=1e-6):
        self.ridge = ridge

    def fit(self, X, Y):
        X, Y = check_X_y(X, Y, multi_output=True, y_numeric=True)
        Y = Y.reshape(len(Y), -1)
        if Y.shape[1] != X.shape[1]:
            raise DimMismatch("targets must have the same dimension as the features")
        self.operator_ = koopman_fit((X, Y), self.ridge)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "operator_")
        X = check_array(X)
        return X @ self.operator_.T

    def rollout(self, x0, steps):
        check_is_fitted(self, "operator_")
        out = [np.asarray(x0, dtype=float)]
        for _ in range(steps):
            out.append(self.operator_ @ out[-1])
        return np.array(out[1:])


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def model_update(Theta, gradient, eta, l1_beta, moment_rho, M=None):
    """Proximal (soft-threshold) gradient step plus a squared-gradient average."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not 0 < moment_rho < 1:
        raise ValueError("moment_rho must lie in (0, 1)")
    Theta = np.asarray(Theta, dtype=float)
    g = np.asarray(gradient, dtype=float)
    M = np.zeros_like(g) if M is None else np.asarray(M, dtype=float)
    return soft_threshold(Theta - eta * g, eta * l1_beta), moment_rho * M + (1.0 - moment_rho) * g * g


def primal_dual_step(X, cost_grad, constraint_fn, multipliers, etas, box=None, U=None, constraint_jac=None):
    """Projected primal descent on the Lagrangian, then projected dual ascent.

    ``constraint_fn(X, U)`` returns the constraint values and
    ``constraint_jac(X, U)`` their Jacobian (rows per constraint).
    """
    eta_x, eta_l = etas
    if eta_x <= 0 or eta_l <= 0:
        raise ValueError("step sizes must be positive")
    X = np.atleast_1d(np.asarray(X, dtype=float))
    lam = np.atleast_1d(np.asarray(multipliers, dtype=float))
    grad = np.atleast_1d(np.asarray(cost_grad(X) if callable(cost_grad) else cost_grad, dtype=float))
    g = np.atleast_1d(np.asarray(constraint_fn(X, U), dtype=float))
    J = np.atleast_2d(np.asarray(constraint_jac(X, U), dtype=float)) if constraint_jac is not None else np.ones((g.size, X.size))
    X_new = X - eta_x * (grad + J.T @ lam)
    if box is not None:
        X_new = np.clip(X_new, box[0], box[1])
    lam_new = np.maximum(0.0, lam + eta_l * g)
    return X_new, lam_new


def population_update(P, costs, eta_p):
    if eta_p <= 0:
        raise ValueError("eta_p must be positive")
    h = np.asarray(costs, dtype=float)
    logw = np.log(np.maximum(np.asarray(P, dtype=float), 1e-300)) - eta_p * (h - h.min())
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def chance_constraint_ok(samples_of_g, delta):
    g = np.asarray(samples_of_g, dtype=float)
    if g.size < 2:
        raise TooFewSamples("at least two samples are required")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return bool(g.mean() + np.sqrt(2.0 * g.var() * np.log(1.0 / delta)) <= 1e-12)


def cloud_lyapunov_ok(V_samples_next, V_prev, x_norm_sq, kappa, slack_c):
    if kappa <= 0 or slack_c < 0:
        raise ValueError("kappa must be positive and slack nonnegative")
    return bool(np.mean(V_samples_next) - V_prev <= -kappa * x_norm_sq + slack_c + 1e-12)


@dataclass
class CloudConfig:
    n_plans: int = 16
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    beta: float = 0.9
    T0: float = 1.0
    eta_p: float = 2.0
    epsilon: float = 1e-2
    risk_delta: float = 1e-3
    koopman_window: int = 32
    koopman_ridge: float = 1e-3
    model_eta: float = 0.05
    model_l1: float = 1e-4
    moment_rho: float = 0.9
    dual_eta: float = 0.5
    lyap_kappa: float = 0.05
    lyap_slack: float = 1.0
    max_repairs: int = 5
    qio_iters: int = 40
    qio_eta: float = 1e-2
    qio_rho: float = 1.0
    fixed_temperature: bool = False
    project: bool = True
    transport: str = "sinkhorn"


@dataclass
class CloudState:
    Z: np.ndarray = None
    Xi: np.ndarray = None
    X: np.ndarray = None
    K_op: np.ndarray = None
    Theta: np.ndarray = None
    M: np.ndarray = None
    population: np.ndarray = None
    temperature: TemperatureState = field(default_factory=TemperatureState)
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(1))
    risk_delta: float = 1e-3
    history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    last_plan: int = None

    def __post_init__(self):
        if not 0 < self.risk_delta < 1:
            raise ValueError("risk_delta must lie in (0, 1)")
        if np.any(np.asarray(self.multipliers) < 0):
            raise ValueError("multipliers must be nonnegative")


@dataclass
class CoordinationRecord:
    plan: int
    provisional: int
    rounds: int
    flagged: bool
    chance_ok: bool
    lyapunov_ok: bool
    risk_delta: float
    temperature: float
    coupling: np.ndarray
    forecast: np.ndarray
    weights: dict


class CoordinationContext:
    """What the coordinator needs to know about the world.

    Subclasses provide per-plan objective costs, feasibility, constraint and
    Lyapunov samples, and the transport geometry. The base class answers
    with a static table, which is convenient for tests.

    Parameters
    ----------
    plan_shares : ndarray of shape (K, F)
        Fog load shares for every candidate plan.
    costs : dict
        Objective id -> length-K cost vector.
    transport_cost : ndarray of shape (F, Z)
    g_samples, V_samples : ndarray of shape (K, S), optional
    V_prev, x_norm_sq : float
    forbidden : iterable of int
    """

    def __init__(self, plan_shares, costs, transport_cost, g_samples=None, V_samples=None, V_prev=0.0, x_norm_sq=0.0, forbidden=()):
        self.plan_shares = np.asarray(plan_shares, dtype=float)
        self.costs = {q: np.asarray(c, dtype=float) for q, c in costs.items()}
        self.transport_cost = np.asarray(transport_cost, dtype=float)
        K = self.plan_shares.shape[0]
        self.g_samples = np.full((K, 2), -1.0) if g_samples is None else np.asarray(g_samples, dtype=float)
        self.V_samples = np.zeros((K, 2)) if V_samples is None else np.asarray(V_samples, dtype=float)
        self.V_prev = V_prev
        self.x_norm_sq = x_norm_sq
        self.forbidden = frozenset(forbidden)

    def objective_costs(self, forecast):
        return self.costs

    def infeasible(self, forecast):
        return self.forbidden

    def constraint_samples(self, k, rng):
        return self.g_samples[k]

    def lyapunov(self, k, rng):
        return self.V_samples[k], self.V_prev, self.x_norm_sq

    def violations(self, forecast):
        """Nonnegative constraint violation per plan; zero means unknown or none."""
        return np.zeros(self.plan_shares.shape[0])


def _normalize_costs(costs):
    out = {}
    for q, c in costs.items():
        span = c.max() - c.min()
        out[q] = (c - c.min()) / span if span > 0 else np.zeros_like(c)
    return out


def _adjust_weights(weights, objective, boost=0.1):
    w = dict(weights)
    w[objective] = w.get(objective, 0.0) * (1.0 + boost) + boost / len(w)
    total = sum(w.values())
    return {q: v / total for q, v in w.items()}


def coordinate(state, fog_summaries, ctx, cfg=None, seed=0, confidences=None, demand_shares=None):
    """One coordination round.

    Parameters
    ----------
    state : CloudState
    fog_summaries : list of ndarray
        Per-fog estimates of the zone demand vector.
    ctx : CoordinationContext
    cfg : CloudConfig
    seed : int or numpy Generator
        Drives sampling and constraint scenarios.
    confidences : tuple of (variances, latencies), optional
        Per-fog reliability of the summaries; uniform when omitted.
    demand_shares : ndarray, optional
        Realized shares for the previous interval, used as the Koopman target.

    Returns
    -------
    plan : int
    coupling : ndarray of shape (F, Z)
    state : CloudState
    record : CoordinationRecord
    """
    cfg = CloudConfig() if cfg is None else cfg
    rng = as_generator(seed)
    F = len(fog_summaries)
    if confidences is None:
        c = np.full(F, 1.0 / F)
    else:
        c = confidence_weights(*confidences)
    Z = fuse([(c_f * np.eye(len(s)), s) for c_f, s in zip(c, fog_summaries)])
    Xi = lift(Z)

    # Koopman refit on a sliding window of lifted snapshots.
    history = (state.history + [Xi])[-(cfg.koopman_window + 1) :]
    K_op = state.K_op
    if len(history) >= 3:
        pairs = list(zip(history[:-1], history[1:]))
        K_op = koopman_fit(pairs, cfg.koopman_ridge)
    forecast_xi = K_op @ Xi if K_op is not None else Xi
    forecast = np.maximum(forecast_xi[:-1], 0.0)
    forecast = forecast / forecast.sum() if forecast.sum() > 0 else np.full(Xi.size - 1, 1.0 / (Xi.size - 1))

    # Linear head on the lifted features, trained with a proximal step.
    Theta = np.zeros((Xi.size, Xi.size - 1)) if state.Theta is None else state.Theta
    M = state.M
    if demand_shares is not None and state.Xi is not None:
        pred = state.Xi @ Theta
        grad = np.outer(state.Xi, pred - np.asarray(demand_shares, dtype=float))
        Theta, M = model_update(Theta, grad, cfg.model_eta, cfg.model_l1, cfg.moment_rho, M)

    raw = ctx.objective_costs(forecast)
    costs = _normalize_costs(raw)
    weights = dict(cfg.weights)
    K = len(next(iter(costs.values())))
    forbidden = frozenset(ctx.infeasible(forecast))
    if len(forbidden) >= K:
        forbidden = frozenset()

    lam = np.atleast_1d(state.multipliers).astype(float)
    if state.last_plan is not None:
        g_prev = float(np.mean(ctx.constraint_samples(state.last_plan, rng)))
        lam = np.maximum(0.0, lam + cfg.dual_eta * g_prev)
    violation = np.zeros(K)
    violation[list(forbidden)] = 1.0

    P = np.full(K, 1.0 / K) if state.population is None or len(state.population) != K else state.population
    T_state = state.temperature
    delta = state.risk_delta
    eta_p = cfg.eta_p
    eps = cfg.epsilon
    cost_history = list(state.cost_history)
    fs = FeasibleSet(np.ones(K), forbidden)
    residuals = np.maximum(np.asarray(ctx.violations(forecast), dtype=float), 0.0)

    transport = SinkhornTransport(epsilon=eps, method=cfg.transport, max_iters=20_000, tol=1e-6)
    rounds = 0
    flagged = False
    while True:
        h = sum(weights[q] * costs[q] for q in costs) + lam[0] * violation
        P = population_update(P, h, eta_p)
        cost_history.append(float(P @ h))
        cost_history = cost_history[-T_state.history_window :]
        if not cfg.fixed_temperature:
            var = float(np.var(cost_history))
            T_state = replace(T_state, value=smoothed_temperature(T_state.value, var, T_state.smoothing_beta, "cloud"))
        pi = soft_policy(h, T_state.value)
        u = rng.random()
        provisional = int(np.searchsorted(np.cumsum(P)[:-1], u * P.sum(), side="right"))

        bundle = CostBundle(costs, weights, residuals)
        qcfg = QioConfig(K=K, eta=cfg.qio_eta, rho=cfg.qio_rho, max_iters=cfg.qio_iters, beta=cfg.beta, T0=T_state.value,
                         seed=int(rng.integers(2**32)), project=cfg.project)
        psi0 = np.sqrt(0.5 * pi + 0.5 * P)
        try:
            result = optimize(None, bundle, fs, qcfg, psi0=psi0)
            probs = result.probs
        except NoFeasiblePoint:
            # The start carried no feasible mass; fall back to the Boltzmann
            # policy restricted to the allowed plans.
            probs = np.zeros(K)
            probs[fs.allowed] = soft_policy(h[fs.allowed], T_state.value)
        plan = int(np.searchsorted(np.cumsum(probs)[:-1], rng.random() * probs.sum(), side="right"))

        mu = ctx.plan_shares[plan]
        transport.set_params(epsilon=eps)
        try:
            coupling = transport.fit_transform(ctx.transport_cost, mu / mu.sum(), forecast)
        except NotConverged:
            transport.set_params(method="greedy")
            coupling = transport.fit_transform(ctx.transport_cost, mu / mu.sum(), forecast)
            transport.set_params(method=cfg.transport)

        chance_ok = chance_constraint_ok(ctx.constraint_samples(plan, rng), delta)
        V_next, V_prev, x_sq = ctx.lyapunov(plan, rng)
        lyap_ok = cloud_lyapunov_ok(V_next, V_prev, x_sq, cfg.lyap_kappa, cfg.lyap_slack)
        if (chance_ok and lyap_ok) or rounds >= cfg.max_repairs:
            flagged = not (chance_ok and lyap_ok)
            break
        rounds += 1
        if not chance_ok:
            weights = _adjust_weights(weights, "R" if "R" in weights else next(iter(weights)))
        if not lyap_ok:
            weights = _adjust_weights(weights, "L" if "L" in weights else next(iter(weights)))
        delta = delta / 2.0
        eta_p = 0.9 * eta_p
        eps = 1.1 * eps

    new_state = replace(
        state,
        Z=Z,
        Xi=Xi,
        X=forecast_xi,
        K_op=K_op,
        Theta=Theta,
        M=M,
        population=P,
        temperature=T_state,
        multipliers=lam,
        risk_delta=state.risk_delta,
        history=history,
        cost_history=cost_history,
        last_plan=plan,
    )
    record = CoordinationRecord(plan, provisional, rounds, flagged, chance_ok, lyap_ok, delta, T_state.value, coupling, forecast, weights)
    return plan, coupling, new_state, record
