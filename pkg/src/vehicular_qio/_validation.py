"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import LengthMismatch, ZeroVector

NORM_EPS = 1e-12
PROB_ATOL = 1e-9


def check_vector(x, name="x", min_len=1):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_len:
        raise ValueError(f"{name} must have at least {min_len} entries")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_matrix(m, name="m"):
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_length(*arrays, names=None):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        label = ", ".join(names) if names else "inputs"
        raise LengthMismatch(f"{label} have mismatched lengths {sorted(lengths)}")


def check_distribution(p, name="p", atol=PROB_ATOL):
    arr = check_vector(p, name)
    if np.any(arr < -atol):
        raise ValueError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1 (got {arr.sum():.12g})")
    return np.clip(arr, 0.0, None)


def normalize(v, name="vector"):
    """Scale ``v`` to unit L2 norm, raising :class:`ZeroVector` if impossible."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < NORM_EPS:
        raise ZeroVector(f"{name} has norm {n:.3e}; cannot normalize")
    return v / n


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value


def check_unit_interval(value, name, open_left=True, open_right=True):
    value = float(value)
    lo_ok = value > 0 if open_left else value >= 0
    hi_ok = value < 1 if open_right else value <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in the unit interval, got {value}")
    return value


def as_generator(seed):
    """Counter-based generator (Philox) for an int seed; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def stream(seed, *keys):
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams with different keys never share draws, which lets simulation
    variants consume identical channel randomness (common random numbers).
    """
    entropy = [int(seed) & (2**64 - 1)] + [int(k) & (2**32 - 1) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
