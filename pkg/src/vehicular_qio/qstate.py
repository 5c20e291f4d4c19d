"""Superposition states over candidate plans.

Amplitudes are real unit vectors; squaring them gives a plan distribution.
A joint state couples a communication-plan amplitude with a mobility-plan
amplitude through their outer product plus a free residual, which is what
makes the mutual-information coupling non-trivial.

Plan indices are 0-based throughout.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._validation import NORM_EPS, check_matrix, check_vector, normalize
from .exceptions import NonFinite

MASS_FLOOR = 1e-12

ACTIVATIONS = {
    "sigmoid": expit,
    "tanh": np.tanh,
    "softsign": lambda x: x / (1.0 + np.abs(x)),
}


def init_superposition(features, weight, bias, activation="sigmoid"):
    """Unit-norm amplitudes ``act(weight @ features + bias) / ||.||``."""
    z = check_vector(features, "features")
    W = check_matrix(weight, "weight")
    b = check_vector(bias, "bias")
    if W.shape != (b.size, z.size):
        raise ValueError(f"weight must have shape {(b.size, z.size)}, got {W.shape}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}") from None
    return normalize(act(W @ z + b), "activated superposition")


def probabilities(psi):
    psi = np.asarray(psi, dtype=float)
    p = psi * psi
    # Guard against rounding drift in callers that pass "almost" unit vectors.
    return p / p.sum()


@dataclass(frozen=True)
class JointAmplitude:
    """Joint communication x mobility amplitude ``outer(psi_c, psi_m) + residual``."""

    psi_c: np.ndarray
    psi_m: np.ndarray
    residual: np.ndarray = field(default=None)

    def __post_init__(self):
        c = check_vector(self.psi_c, "psi_c")
        m = check_vector(self.psi_m, "psi_m")
        r = np.zeros((c.size, m.size)) if self.residual is None else check_matrix(self.residual, "residual")
        if r.shape != (c.size, m.size):
            raise ValueError(f"residual must have shape {(c.size, m.size)}, got {r.shape}")
        object.__setattr__(self, "psi_c", c)
        object.__setattr__(self, "psi_m", m)
        object.__setattr__(self, "residual", r)

    @property
    def values(self):
        return np.outer(self.psi_c, self.psi_m) + self.residual

    @property
    def shape(self):
        return self.residual.shape


def joint_encode(psi_c, psi_m, residual=None):
    return JointAmplitude(psi_c, psi_m, residual)


def _joint_values(joint):
    if isinstance(joint, JointAmplitude):
        return joint.values
    return check_matrix(joint, "joint")


def marginals(joint):
    """Row and column sums of the squared joint amplitude."""
    p = _joint_values(joint) ** 2
    return p.sum(axis=1), p.sum(axis=0)


def _mi_terms(values):
    p = values**2
    total = p.sum()
    if total < MASS_FLOOR:
        raise NonFinite("joint amplitude carries no mass")
    p_hat = p / total
    theta_c = p_hat.sum(axis=1)
    theta_m = p_hat.sum(axis=0)
    denom = np.outer(theta_c, theta_m)
    mask = p_hat >= MASS_FLOOR
    log_ratio = np.zeros_like(p_hat)
    log_ratio[mask] = np.log(p_hat[mask] / denom[mask])
    return p_hat, log_ratio, total


def mutual_information(joint):
    """Mutual information (nats) of the squared joint amplitude.

    The squared mass is renormalized first, so unnormalized inputs are
    treated as the distribution they are proportional to.
    """
    p_hat, log_ratio, _ = _mi_terms(_joint_values(joint))
    return float(np.sum(p_hat * log_ratio))


def mi_gradients(joint):
    """Gradients of the mutual information w.r.t. ``psi_c`` and ``psi_m``.

    Differentiates through ``values = outer(psi_c, psi_m) + residual`` with the
    residual held fixed.
    """
    if not isinstance(joint, JointAmplitude):
        raise TypeError("mi_gradients needs a JointAmplitude (factored form)")
    values = joint.values
    p_hat, log_ratio, total = _mi_terms(values)
    info = float(np.sum(p_hat * log_ratio))
    d_values = 2.0 * values * (log_ratio - info) / total
    g_c = d_values @ joint.psi_m
    g_m = d_values.T @ joint.psi_c
    if not (np.all(np.isfinite(g_c)) and np.all(np.isfinite(g_m))):
        raise NonFinite("mutual-information gradient is not finite")
    return g_c, g_m


def entangle_neighbors(psi_self, neighbor_psis=(), couplings=()):
    """Multiply in ``(1 + E_j * psi_j)`` for every neighbour and renormalize."""
    psi = check_vector(psi_self, "psi_self")
    neighbor_psis = list(neighbor_psis)
    couplings = list(couplings)
    if len(neighbor_psis) != len(couplings):
        raise ValueError("one coupling per neighbour is required")
    if not neighbor_psis:
        return psi.copy()
    out = psi.copy()
    for psi_j, e_j in zip(neighbor_psis, couplings):
        psi_j = check_vector(psi_j, "neighbor psi")
        if psi_j.size != psi.size:
            raise ValueError("neighbour amplitudes must match psi_self in length")
        if abs(e_j) > 1:
            raise ValueError(f"coupling magnitude must be <= 1, got {e_j}")
        out = out * (1.0 + e_j * psi_j)
    return normalize(out, "entangled amplitudes")


def collapse(psi):
    """One-hot selector at the argmax (lowest index wins ties)."""
    psi = check_vector(psi, "psi")
    k = int(np.argmax(psi))
    out = np.zeros_like(psi)
    out[k] = 1.0
    return out, k


def should_collapse(cost_now, cost_prev, threshold):
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return (cost_now - cost_prev) >= threshold


def is_normalized(psi, atol=1e-9):
    return abs(np.linalg.norm(psi) - 1.0) <= atol


__all__ = [
    "ACTIVATIONS",
    "JointAmplitude",
    "NORM_EPS",
    "collapse",
    "entangle_neighbors",
    "init_superposition",
    "is_normalized",
    "joint_encode",
    "marginals",
    "mi_gradients",
    "mutual_information",
    "probabilities",
    "should_collapse",
]
