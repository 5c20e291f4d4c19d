"""Quantum-inspired optimization loop over joint communication/mobility plans.

Each iteration moves the plan amplitudes along the tangent of the unit
sphere against the penalized energy, re-anneals a Boltzmann soft policy,
nudges the joint amplitudes toward a product (coupling-free) form, refreshes
the Tchebycheff objective weights and projects back onto the feasible set.
A descent certificate guards every step; a violated certificate rejects the
step, halves the step size and doubles the penalty.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_generator, normalize
from .anneal import TEMPERATURE_FLOOR, smoothed_temperature
from .energy import FORBIDDEN_RESIDUAL, CostBundle, FeasibleSet, assemble_cost, project_feasible, tchebycheff
from .exceptions import Diverged
from .qstate import JointAmplitude, init_superposition, mi_gradients, mutual_information

ETA_FLOOR = 1e-8
RHO_CAP = 1e6


@dataclass
class QioConfig:
    """Optimizer settings.

    ``project=False`` keeps the constraint penalty in the operator but never
    projects the iterate back onto the feasible set.

    ``L_smooth=None`` estimates the smoothness bound each iteration as twice
    the spread of the operator diagonal, which upper-bounds the curvature of
    the energy along the sphere.
    """

    K: int = 0
    L: int = 1
    eta: float = 1e-2
    beta: float = 0.9
    rho: float = 1.0
    tol_energy: float = 1e-8
    tol_coupling: float = 1e-6
    max_iters: int = 5000
    L_smooth: float = None
    alpha_min: float = 1e-3
    seed: int = 0
    T0: float = 1.0
    history_window: int = 16
    mi_step_ratio: float = 0.1
    project: bool = True

    def __post_init__(self):
        for name in ("eta", "tol_energy", "tol_coupling", "alpha_min", "T0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be positive")
        if self.L_smooth is not None and not self.L_smooth > 0:
            raise ValueError("L_smooth must be positive")


@dataclass
class QioTrace:
    energy: list = field(default_factory=list)
    temperature: list = field(default_factory=list)
    coupling: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    psi_norm: list = field(default_factory=list)
    accepted: list = field(default_factory=list)

    COLUMNS = ("iteration", "energy", "temperature", "coupling", "grad_norm", "eta", "rho", "selected", "psi_norm", "accepted")

    def __len__(self):
        return len(self.energy)

    @property
    def n_backoffs(self):
        return sum(1 for a in self.accepted if not a)

    def rows(self):
        for t in range(len(self)):
            yield (
                t,
                self.energy[t],
                self.temperature[t],
                self.coupling[t],
                self.grad_norm[t],
                self.eta[t],
                self.rho[t],
                self.selected[t],
                self.psi_norm[t],
                int(self.accepted[t]),
            )


@dataclass
class QioResult:
    psi: np.ndarray
    probs: np.ndarray
    plan: int
    trace: QioTrace
    psi_m: np.ndarray = None
    weights: dict = None
    converged: bool = False
    n_iter: int = 0

    def __iter__(self):
        return iter((self.psi, self.probs, self.plan, self.trace))


def step_size_backoff(eta, violations):
    if eta <= 0:
        raise ValueError("eta must be positive")
    return max(eta * 2.0 ** (-int(violations)), ETA_FLOOR)


def _provider(costs):
    if isinstance(costs, CostBundle):
        return lambda t: costs, True
    if callable(costs):
        return costs, False
    raise TypeError("costs must be a CostBundle or a callable t -> CostBundle")


def optimize(features, costs, fs=None, cfg=None, psi0=None, psi_m0=None, residual=None, weight=None, bias=None, activation="sigmoid"):
    """Run the optimization loop.

    Parameters
    ----------
    features : array-like
        Feature vector that seeds the initial superposition.
    costs : CostBundle or callable
        Either a fixed bundle or ``t -> CostBundle``.
    fs : FeasibleSet, optional
        Defaults to the unconstrained set.
    cfg : QioConfig, optional
    psi0 : array-like, optional
        Explicit initial plan amplitudes (overrides the feature map).
    psi_m0 : array-like, optional
        Initial mobility amplitudes, uniform by default.
    residual : array-like, optional
        Fixed free part of the joint amplitude, shape (K, L).
    weight, bias : array-like, optional
        Feature map; zero weight and zero bias give a uniform start.

    Returns
    -------
    QioResult
        Unpacks as ``(psi, probs, plan, trace)``.
    """
    provider, constant = _provider(costs)
    bundle = provider(0)
    K = bundle.n_plans
    cfg = QioConfig(K=K) if cfg is None else cfg
    fs = FeasibleSet.unconstrained(K) if fs is None else fs
    rng = as_generator(cfg.seed)

    if psi0 is not None:
        psi = normalize(np.asarray(psi0, dtype=float), "psi0")
    else:
        z = np.atleast_1d(np.asarray(features, dtype=float))
        W = np.zeros((K, z.size)) if weight is None else weight
        b = np.zeros(K) if bias is None else bias
        psi = init_superposition(z, W, b, activation)
    if cfg.project:
        psi = project_feasible(psi, fs)
    L = cfg.L if psi_m0 is None else len(psi_m0)
    psi_m = np.full(L, 1.0 / np.sqrt(L)) if psi_m0 is None else normalize(np.asarray(psi_m0, dtype=float), "psi_m0")
    R = np.zeros((K, L)) if residual is None else np.asarray(residual, dtype=float)
    coupled = bool(np.any(R != 0))

    objectives = list(bundle.per_objective)
    multi = len(objectives) > 1
    weights = dict(bundle.weights)
    C = bundle.objective_matrix()
    h = assemble_cost(bundle)

    eta = float(cfg.eta)
    rho = float(cfg.rho)
    T = max(float(cfg.T0), TEMPERATURE_FLOOR)
    caps = fs.prob_upper_bounds
    allowed = fs.allowed
    constrained = cfg.project and not (allowed.all() and (caps >= 1.0).all())
    # Forbidden plans pay their measured violation when one is known.
    forbidden_res = np.where(bundle.residuals > 0, bundle.residuals, FORBIDDEN_RESIDUAL)
    history = []
    trace = QioTrace()
    converged = False
    t = 0

    for t in range(int(cfg.max_iters)):
        if not constant and t > 0:
            bundle = provider(t)
            C = bundle.objective_matrix()
        if multi or not constant:
            w = np.array([weights.get(q, 0.0) for q in objectives])
            h = w @ C
        p = psi * psi
        G = np.where(allowed, np.maximum(bundle.residuals, p - caps), forbidden_res)
        H = h + rho * np.maximum(0.0, G) ** 2

        E = float(H @ p)
        if not np.isfinite(E):
            raise Diverged(f"energy became non-finite at iteration {t}")
        grad = 2.0 * H * psi
        lam = float(psi @ grad)
        d = -grad + lam * psi
        g2 = float(d @ d)
        psi_new = psi + eta * d
        psi_new = psi_new / np.sqrt(psi_new @ psi_new)

        history.append(E)
        window = history[-cfg.history_window :]
        mean = sum(window) / len(window)
        var = sum((x - mean) ** 2 for x in window) / len(window)
        T = smoothed_temperature(T, var, cfg.beta, "qio")
        w_soft = np.exp(-(H - H.min()) / T)
        selected = int(np.searchsorted(np.cumsum(w_soft)[:-1], rng.random() * w_soft.sum(), side="right"))

        info = 0.0
        psi_m_new = psi_m
        if coupled:
            joint = JointAmplitude(psi_new, psi_m, R)
            info = mutual_information(joint)
            g_c, g_m = mi_gradients(joint)
            step = cfg.mi_step_ratio * eta
            psi_new = normalize(psi_new - step * g_c, "psi")
            psi_m_new = normalize(psi_m - step * g_m, "psi_m")

        if multi:
            expected = C @ (psi_new * psi_new)
            _, alpha = tchebycheff(expected, None, cfg.alpha_min)
            new_weights = dict(zip(objectives, alpha))
        else:
            new_weights = weights

        if constrained:
            psi_new = project_feasible(psi_new, fs)

        E_next = float(H @ (psi_new * psi_new))
        L_smooth = cfg.L_smooth if cfg.L_smooth is not None else max(2.0 * float(H.max() - H.min()), 1e-12)
        # A projected step is certified against the gradient mapping, the
        # part of the descent direction the feasible set lets through.
        g2_cert = float((psi_new - psi) @ (psi_new - psi)) / (eta * eta) if constrained else g2
        bound = -eta * min(g2, g2_cert) * (1.0 - eta * L_smooth)
        ok = (E_next - E <= bound + 1e-15 * max(1.0, abs(E))) and E_next <= E + 1e-15 * max(1.0, abs(E))

        trace.energy.append(E)
        trace.temperature.append(T)
        trace.coupling.append(info)
        trace.grad_norm.append(np.sqrt(g2))
        trace.eta.append(eta)
        trace.rho.append(rho)
        trace.selected.append(selected)
        trace.psi_norm.append(float(np.sqrt(psi @ psi)))
        trace.accepted.append(ok)

        if not ok:
            eta = max(0.5 * eta, ETA_FLOOR)
            rho = min(2.0 * rho, RHO_CAP)
            continue
        psi = psi_new
        psi_m = psi_m_new
        weights = new_weights
        if abs(E_next - E) <= cfg.tol_energy and info <= cfg.tol_coupling:
            converged = True
            break

    probs = psi * psi
    probs = probs / probs.sum()
    plan = int(np.argmax(probs))
    return QioResult(psi, probs, plan, trace, psi_m, weights, converged, t + 1)


class QuantumInspiredOptimizer(BaseEstimator):
    """Estimator wrapper around :func:`optimize`.

    ``fit`` takes a cost table with one row per candidate plan and one column
    per objective; ``predict`` returns the committed plan and
    ``predict_proba`` the final plan distribution.

    Parameters
    ----------
    objective_weights : array-like, optional
        One nonnegative weight per column, uniform by default.
    eta, beta, rho, tol_energy, tol_coupling, max_iters, L_smooth, alpha_min : see QioConfig
    init_scale : float
        Standard deviation of the random feature map; 0 gives a uniform start.
    activation : str
    seed : int
    """

    def __init__(
        self,
        objective_weights=None,
        eta=1e-2,
        beta=0.9,
        rho=1.0,
        tol_energy=1e-8,
        tol_coupling=1e-6,
        max_iters=5000,
        L_smooth=None,
        alpha_min=1e-3,
        init_scale=0.0,
        activation="sigmoid",
        seed=0,
    ):
        self.objective_weights = objective_weights
        self.eta = eta
        self.beta = beta
        self.rho = rho
        self.tol_energy = tol_energy
        self.tol_coupling = tol_coupling
        self.max_iters = max_iters
        self.L_smooth = L_smooth
        self.alpha_min = alpha_min
        self.init_scale = init_scale
        self.activation = activation
        self.seed = seed

    def fit(self, X, y=None, caps=None, forbidden=(), features=None):
        X = check_array(X, ensure_min_features=1)
        K, Q = X.shape
        w = np.full(Q, 1.0 / Q) if self.objective_weights is None else np.asarray(self.objective_weights, dtype=float)
        names = [f"q{j}" for j in range(Q)]
        bundle = CostBundle({n: X[:, j] for j, n in enumerate(names)}, dict(zip(names, w)))
        fs = FeasibleSet(np.ones(K) if caps is None else caps, frozenset(forbidden))
        cfg = QioConfig(
            K=K,
            eta=self.eta,
            beta=self.beta,
            rho=self.rho,
            tol_energy=self.tol_energy,
            tol_coupling=self.tol_coupling,
            max_iters=self.max_iters,
            L_smooth=self.L_smooth,
            alpha_min=self.alpha_min,
            seed=self.seed,
        )
        z = np.ones(1) if features is None else np.atleast_1d(np.asarray(features, dtype=float))
        rng = as_generator(self.seed)
        W = self.init_scale * rng.standard_normal((K, z.size))
        result = optimize(z, bundle, fs, cfg, weight=W, bias=np.zeros(K), activation=self.activation)
        self.psi_ = result.psi
        self.probabilities_ = result.probs
        self.plan_ = result.plan
        self.trace_ = result.trace
        self.weights_ = result.weights
        self.converged_ = result.converged
        self.n_iter_ = result.n_iter
        return self

    def predict(self, X=None):
        check_is_fitted(self, "plan_")
        return self.plan_

    def predict_proba(self, X=None):
        check_is_fitted(self, "probabilities_")
        return self.probabilities_
