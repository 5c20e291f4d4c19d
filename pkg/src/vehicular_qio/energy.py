"""Cost assembly, the penalized energy operator and its companions.

The energy operator is always diagonal, so it is stored as the vector of its
diagonal entries.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_vector, normalize
from .exceptions import InfeasibleSimplex, InvalidWeights, LengthMismatch, NoFeasiblePoint

OBJECTIVES = ("L", "R", "E", "Th")
FORBIDDEN_RESIDUAL = 1e3


@dataclass
class CostBundle:
    """Per-plan objective costs, objective weights and constraint residuals.

    Parameters
    ----------
    per_objective : dict
        Objective id -> cost vector of length K.
    weights : dict
        Objective id -> nonnegative weight. Missing objectives weigh 0.
    residuals : array-like, optional
        Constraint violation per plan; values <= 0 are feasible.
    penalty_rho : float
        Penalty coefficient.
    """

    per_objective: dict
    weights: dict
    residuals: np.ndarray = None
    penalty_rho: float = 0.0

    def __post_init__(self):
        if not self.per_objective:
            raise ValueError("at least one objective is required")
        costs = {q: check_vector(c, f"cost[{q}]") for q, c in self.per_objective.items()}
        sizes = {c.size for c in costs.values()}
        if len(sizes) != 1:
            raise LengthMismatch(f"objective cost vectors have lengths {sorted(sizes)}")
        (k,) = sizes
        unknown = set(self.weights) - set(costs)
        if unknown:
            raise InvalidWeights(f"weights given for objectives without costs: {sorted(unknown)}")
        weights = {q: float(self.weights.get(q, 0.0)) for q in costs}
        if any(w < 0 or not np.isfinite(w) for w in weights.values()):
            raise InvalidWeights("weights must be finite and nonnegative")
        if not any(w > 0 for w in weights.values()):
            raise InvalidWeights("at least one weight must be positive")
        res = np.zeros(k) if self.residuals is None else check_vector(self.residuals, "residuals")
        if res.size != k:
            raise LengthMismatch(f"residuals have length {res.size}, expected {k}")
        if self.penalty_rho < 0:
            raise ValueError("penalty_rho must be >= 0")
        self.per_objective = costs
        self.weights = weights
        self.residuals = res

    @property
    def n_plans(self):
        return self.residuals.size

    def objective_matrix(self):
        """Costs stacked as an array of shape (n_objectives, K), in key order."""
        return np.vstack([self.per_objective[q] for q in self.per_objective])

    def with_weights(self, weights):
        return CostBundle(self.per_objective, weights, self.residuals, self.penalty_rho)


@dataclass
class FeasibleSet:
    """Per-plan probability caps plus a set of forbidden plans."""

    prob_upper_bounds: np.ndarray
    forbidden: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        caps = check_vector(self.prob_upper_bounds, "prob_upper_bounds")
        if np.any(caps <= 0) or np.any(caps > 1):
            raise ValueError("probability caps must lie in (0, 1]")
        forbidden = frozenset(int(k) for k in self.forbidden)
        if any(k < 0 or k >= caps.size for k in forbidden):
            raise ValueError("forbidden plan index out of range")
        allowed = np.ones(caps.size, dtype=bool)
        allowed[list(forbidden)] = False
        if not allowed.any():
            raise NoFeasiblePoint("every plan is forbidden")
        if caps[allowed].sum() < 1.0 - 1e-12:
            raise NoFeasiblePoint("caps of allowed plans sum to less than one")
        self.prob_upper_bounds = caps
        self.forbidden = forbidden

    @classmethod
    def unconstrained(cls, k):
        return cls(np.ones(k))

    @property
    def allowed(self):
        mask = np.ones(self.prob_upper_bounds.size, dtype=bool)
        mask[list(self.forbidden)] = False
        return mask

    def residuals(self, probs):
        """``p - cap`` per plan, with a large constant for forbidden plans."""
        res = np.asarray(probs, dtype=float) - self.prob_upper_bounds
        res[~self.allowed] = FORBIDDEN_RESIDUAL
        return res


def minmax_normalize(costs):
    """Rescale each objective to [0, 1]; constant objectives map to 0."""
    out = {}
    for q, c in costs.items():
        c = np.asarray(c, dtype=float)
        span = c.max() - c.min()
        out[q] = (c - c.min()) / span if span > 0 else np.zeros_like(c)
    return out


def assemble_cost(bundle):
    h = np.zeros(bundle.n_plans)
    for q, c in bundle.per_objective.items():
        h += bundle.weights[q] * c
    return h


def penalized_operator(h, residuals, rho):
    """Diagonal of ``diag(h) + rho * diag(max(0, G)^2)``."""
    h = check_vector(h, "h")
    g = check_vector(residuals, "residuals")
    if g.size != h.size:
        raise LengthMismatch("h and residuals differ in length")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    return h + rho * np.maximum(0.0, g) ** 2


def energy(psi, H):
    psi = np.asarray(psi, dtype=float)
    return float(np.dot(np.asarray(H, dtype=float), psi * psi))


def energy_gradient(psi, H):
    return 2.0 * np.asarray(H, dtype=float) * np.asarray(psi, dtype=float)


def tchebycheff(costs, utopia=None, alpha_min=1e-3):
    """Weighted Tchebycheff value over the clipped weight simplex.

    Minimizes ``max_q alpha_q * (C_q - C*_q)`` over ``sum(alpha) = 1``,
    ``alpha_q >= alpha_min``. The minimum has a closed form (equalize the
    weighted gaps where the clipping allows), and among the minimizers the
    lexicographically smallest weight vector is returned.

    Parameters
    ----------
    costs : dict or array-like
        Objective costs. Dicts are read in insertion order.
    utopia : dict or array-like, optional
        Reference point, zero by default.
    alpha_min : float
        Lower clip on every weight.

    Returns
    -------
    value : float
    alpha : ndarray
    """
    if isinstance(costs, dict):
        keys = list(costs)
        c = np.array([costs[q] for q in keys], dtype=float)
        u = np.zeros_like(c) if utopia is None else np.array([utopia.get(q, 0.0) for q in keys], dtype=float)
    else:
        c = check_vector(costs, "costs")
        u = np.zeros_like(c) if utopia is None else check_vector(utopia, "utopia")
    if c.size != u.size:
        raise LengthMismatch("costs and utopia differ in length")
    n = c.size
    if alpha_min <= 0:
        raise ValueError("alpha_min must be positive")
    if alpha_min * n > 1 + 1e-15:
        raise InfeasibleSimplex(f"alpha_min={alpha_min} is infeasible for {n} objectives")
    d = c - u
    if np.any(d < -1e-12):
        raise ValueError("costs must dominate the utopia point")
    d = np.maximum(d, 0.0)

    value = alpha_min * d.max()
    if np.all(d > 0):
        value = max(value, 1.0 / np.sum(1.0 / d))
    lower = np.full(n, alpha_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = np.where(d > 0, value / d, 1.0)
    upper = np.clip(upper, lower, 1.0)

    # Greedy lexicographic fill: each weight as small as the remaining
    # upper bounds allow.
    alpha = np.empty(n)
    used = 0.0
    for i in range(n):
        rest = upper[i + 1 :].sum()
        alpha[i] = min(upper[i], max(lower[i], 1.0 - used - rest))
        used += alpha[i]
    alpha[-1] += 1.0 - alpha.sum()
    return float(value), alpha


def project_feasible(psi, fs):
    """Project amplitudes onto the unit sphere intersected with the feasible set.

    Forbidden plans are zeroed, probabilities above their cap are clipped, and
    the surplus is redistributed proportionally among the unclipped plans.
    This is the fixed point of alternating clip-and-renormalize, computed
    exactly by growing the saturated set. Signs of the amplitudes are kept.
    """
    psi = check_vector(psi, "psi")
    caps = fs.prob_upper_bounds
    if psi.size != caps.size:
        raise LengthMismatch("psi and feasible set differ in length")
    allowed = fs.allowed
    p = np.where(allowed, psi * psi, 0.0)
    if p.sum() < 1e-24:
        raise NoFeasiblePoint("projection removed all probability mass")
    p = p / p.sum()

    saturated = np.zeros(p.size, dtype=bool)
    for _ in range(p.size + 1):
        free = allowed & ~saturated
        budget = 1.0 - caps[saturated].sum()
        free_mass = p[free].sum()
        if free_mass > 0:
            q = np.where(saturated, caps, np.where(free, p * (budget / free_mass), 0.0))
        else:
            # Every remaining plan carries zero mass; spread the budget evenly.
            q = np.where(saturated, caps, np.where(free, budget / max(free.sum(), 1), 0.0))
        over = free & (q > caps)
        if not over.any():
            break
        saturated |= over
    q = np.minimum(np.maximum(q, 0.0), caps)
    sign = np.where(psi < 0, -1.0, 1.0)
    return normalize(sign * np.sqrt(q), "projected amplitudes")


def descent_certificate(E_next, E_prev, grad_norm_sq, eta, L_smooth):
    if eta <= 0 or L_smooth <= 0:
        raise ValueError("eta and L_smooth must be positive")
    bound = -eta * grad_norm_sq + eta * eta * L_smooth * grad_norm_sq
    return bool(E_next - E_prev <= bound + 1e-15 * max(1.0, abs(E_prev)))
