"""Synthetic action kernels standing in for ``p_LLM(a | s, c)``.

The kernels are built from a solved environment (its optimal policy) at
construction time and are frozen afterwards. ``locally_consistent`` mixes the
optimal policy with the uniform distribution, so the total-variation gap to
``pi*`` is known in closed form: ``eps(r) * TV(pi*, uniform) <= eps(r)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state, check_stochastic_rows
from .exceptions import ValidationError

KINDS = ("locally_consistent", "copy_action", "prior_knowledge")


@dataclass(frozen=True)
class LinearModulus:
    """``eps(r) = min(1, slope * r)``; ``eps(inf) = 1``."""

    slope: float = 1.0

    def __post_init__(self):
        if self.slope < 0:
            raise ValidationError("epsilon slope must be >= 0")

    def __call__(self, r):
        if math.isinf(r):
            return 1.0 if self.slope > 0 else 0.0
        return min(1.0, self.slope * float(r))

    def to_dict(self):
        return {"form": "linear", "slope": self.slope}


@dataclass(frozen=True)
class LlmKernel:
    """Frozen stochastic action kernel.

    Parameters
    ----------
    kind : {"locally_consistent", "copy_action", "prior_knowledge"}
    pi_star : ndarray of shape (n_states, n_actions)
        Optimal policy of the environment, seen only here.
    distances : ndarray of shape (n_states, n_states)
        State metric used to measure how far a case is from the query.
    epsilon : callable
        Local-consistency modulus, non-decreasing with ``epsilon(0) == 0``.
    r_void : float, optional
        Effective distance of the void case; defaults to the metric diameter.
    fallback : ndarray of shape (n_states, n_actions), optional
        Action distribution of the ``prior_knowledge`` kind; uniform if omitted.
    """

    kind: str
    pi_star: np.ndarray
    distances: np.ndarray
    epsilon: object = field(default_factory=LinearModulus)
    r_void: float = None
    fallback: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        pi = check_stochastic_rows(np.array(self.pi_star, dtype=float), "pi_star")
        d = np.asarray(self.distances, dtype=float)
        if d.shape != (pi.shape[0], pi.shape[0]):
            raise ValidationError("distances must be (n_states, n_states)")
        if self.epsilon(0.0) != 0.0:
            raise ValidationError("epsilon(0) must be 0")
        fb = self.fallback
        if fb is None:
            fb = np.full_like(pi, 1.0 / pi.shape[1])
        fb = check_stochastic_rows(np.array(fb, dtype=float), "fallback")
        object.__setattr__(self, "pi_star", pi)
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "fallback", fb)
        if self.r_void is None:
            object.__setattr__(self, "r_void", float(d.max()))

    @property
    def n_states(self):
        return self.pi_star.shape[0]

    @property
    def n_actions(self):
        return self.pi_star.shape[1]

    def case_distance(self, s, case):
        return self.r_void if case is None else float(self.distances[s, case.s])


def action_distribution(kernel, s, case):
    """``p(. | s, c)``; ``case=None`` stands for the void case."""
    uniform = np.full(kernel.n_actions, 1.0 / kernel.n_actions)
    if kernel.kind == "locally_consistent":
        eps = kernel.epsilon(kernel.case_distance(s, case))
        return (1.0 - eps) * kernel.pi_star[s] + eps * uniform
    if kernel.kind == "copy_action":
        if case is None:
            return uniform
        p = np.zeros(kernel.n_actions)
        p[case.a] = 1.0
        return p
    return kernel.fallback[s].copy()


def distribution_table(kernel, mem):
    """Kernel outputs for every state and every retrieval column.

    Returns an array of shape ``(n_states, len(mem) + 1, n_actions)`` with the
    void case in column 0.
    """
    cases = [None, *mem.cases]
    table = np.empty((kernel.n_states, len(cases), kernel.n_actions))
    for s in range(kernel.n_states):
        for j, c in enumerate(cases):
            table[s, j] = action_distribution(kernel, s, c)
    return table


def case_column(kernel, case):
    """Kernel outputs for one case at every state, shape ``(n_states, n_actions)``."""
    return np.stack([action_distribution(kernel, s, case) for s in range(kernel.n_states)])


def sample_action(kernel, s, case, rng):
    rng = check_random_state(rng)
    cdf = np.cumsum(action_distribution(kernel, s, case))
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
               kernel.n_actions - 1)
