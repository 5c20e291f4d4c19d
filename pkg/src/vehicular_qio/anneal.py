"""Variance-driven temperatures and Boltzmann soft selection."""

from dataclasses import dataclass, replace

import numpy as np

from ._validation import as_generator, check_distribution, check_vector

TEMPERATURE_FLOOR = 1e-6
VARIANTS = ("qio", "vehicle", "cloud")


@dataclass(frozen=True)
class TemperatureState:
    value: float = 1.0
    smoothing_beta: float = 0.9
    history_window: int = 16

    def __post_init__(self):
        if not 0 < self.smoothing_beta < 1:
            raise ValueError("smoothing_beta must lie in (0, 1)")
        if int(self.history_window) < 1:
            raise ValueError("history_window must be positive")
        if not self.value >= 0:
            raise ValueError("temperature must be nonnegative")
        object.__setattr__(self, "value", max(float(self.value), TEMPERATURE_FLOOR))


def smoothed_temperature(T, variance, beta, variant="qio"):
    """One smoothing step; the vehicle variant damps the variance as v/(1+v)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown temperature variant {variant!r}")
    drive = variance / (1.0 + variance) if variant == "vehicle" else variance
    out = np.maximum(beta * T + (1.0 - beta) * drive, TEMPERATURE_FLOOR)
    return float(out) if np.ndim(out) == 0 else out


def update_temperature(state, cost_history, variant="qio"):
    hist = check_vector(cost_history, "cost_history")
    window = hist[-int(state.history_window):]
    var = float(np.var(window))
    return replace(state, value=smoothed_temperature(state.value, var, state.smoothing_beta, variant))


def soft_policy(costs, T):
    """Boltzmann distribution ``exp(-h/T)`` with a max-shift for stability."""
    h = check_vector(costs, "costs")
    T = max(float(T), TEMPERATURE_FLOOR)
    logits = -(h - h.min()) / T
    w = np.exp(logits)
    return w / w.sum()


def sample_plan(pi, rng_seed):
    """Inverse-CDF draw from ``pi`` using a seeded counter-based generator.

    ``rng_seed`` may also be a ``numpy.random.Generator`` owned by the caller.
    """
    p = check_distribution(pi, "pi")
    u = as_generator(rng_seed).random()
    # Only plans with positive mass can be drawn, even at rounding boundaries.
    support = np.flatnonzero(p > 0)
    cdf = np.cumsum(p[support])
    cdf[-1] = 1.0
    return int(support[np.searchsorted(cdf, u * cdf[-1], side="right")])


def sample_plans(pi, u):
    """Vectorized inverse-CDF draws for rows of ``pi`` given uniforms ``u``."""
    cdf = np.cumsum(pi, axis=-1)
    cdf[..., -1] = 1.0
    return np.minimum((cdf < np.asarray(u)[..., None]).sum(axis=-1), pi.shape[-1] - 1)
