"""Input validation helpers shared by the estimators and solvers."""

from numbers import Integral

import numpy as np

from .exceptions import ValidationError

ROW_SUM_TOL = 1e-12


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`.

    ``None`` is refused: every random stream in this package must be seeded.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ValidationError(f"expected an integer seed or a Generator, got {seed!r}")


def check_distribution(p, name="distribution", atol=ROW_SUM_TOL):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def check_stochastic_rows(p, name="rows", atol=ROW_SUM_TOL):
    """Check that the last axis of ``p`` holds probability distributions."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    sums = p.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{name} row {idx} sums to {sums[idx]!r}, not 1")
    return p


def check_index(i, n, name="index"):
    if not isinstance(i, (Integral, np.integer)) or not 0 <= i < n:
        raise ValidationError(f"{name} {i!r} out of range [0, {n})")
    return int(i)


def check_positive(x, name):
    if not np.isfinite(x) or x <= 0:
        raise ValidationError(f"{name} must be > 0, got {x!r}")
    return float(x)
