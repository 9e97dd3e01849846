"""Finite discounted MDPs and exact oracle solvers.

Everything downstream (the synthetic LLM kernel, the value-gap certificates,
the tracking diagnostics) is measured against the solutions computed here.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_index, check_random_state, check_stochastic_rows
from .exceptions import ConvergenceError, ValidationError

TIE_ATOL = 1e-9


@dataclass(frozen=True)
class TabularMdp:
    """Finite environment ``<S, A, P, R, gamma>``.

    Parameters
    ----------
    transition : ndarray of shape (n_states, n_actions, n_states)
        ``transition[s, a, s']`` is the probability of moving to ``s'``.
    reward : ndarray of shape (n_states, n_actions)
    gamma : float
        Discount factor in ``[0, 1)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = field(init=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValidationError(f"reward shape {R.shape} does not match transition {P.shape[:2]}")
        if not np.all(np.isfinite(R)):
            raise ValidationError("reward has non-finite entries")
        check_stochastic_rows(P, "transition")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma!r}")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))
        # exact, from the table; feeds the value-gap bound
        object.__setattr__(self, "r_max", float(np.max(np.abs(R))) if R.size else 0.0)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        missing = {"n_states", "n_actions", "gamma", "transition", "reward"} - set(doc)
        if missing:
            raise ValidationError(f"MDP document is missing keys {sorted(missing)}")
        mdp = cls(np.asarray(doc["transition"], dtype=float),
                  np.asarray(doc["reward"], dtype=float), float(doc["gamma"]))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValidationError("n_states/n_actions disagree with the array shapes")
        return mdp


def load_mdp(path):
    with open(path) as fh:
        return TabularMdp.from_dict(json.load(fh))


def save_mdp(mdp, path):
    Path(path).write_text(json.dumps(mdp.to_dict()))


@dataclass(frozen=True)
class ExactSolution:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    residual: float
    n_iter: int
    residuals: tuple = ()


def greedy_policy(q, tie_break="uniform", atol=TIE_ATOL):
    """Greedy action distribution per row of ``q``.

    ``tie_break="uniform"`` spreads mass over every action within ``atol`` of
    the row maximum; ``"lowest"`` puts it all on the lowest such index.
    """
    q = np.asarray(q, dtype=float)
    is_max = q >= q.max(axis=1, keepdims=True) - atol
    if tie_break == "uniform":
        return is_max / is_max.sum(axis=1, keepdims=True)
    if tie_break == "lowest":
        pi = np.zeros_like(q)
        pi[np.arange(q.shape[0]), np.argmax(is_max, axis=1)] = 1.0
        return pi
    raise ValidationError(f"unknown tie_break {tie_break!r}")


def value_iteration(mdp, tol=1e-12, max_iter=100_000, tie_break="uniform"):
    """Solve for ``Q*`` by iterating the Bellman optimality operator.

    Stops once the sup-norm Bellman residual ``||TQ - Q||`` is at most ``tol``.
    The per-iteration residuals are returned so callers can check geometric
    decay.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    q = np.zeros_like(R)
    residuals = []
    for k in range(1, max_iter + 1):
        q_next = R + gamma * P @ q.max(axis=1)
        res = float(np.max(np.abs(q_next - q))) if q.size else 0.0
        residuals.append(res)
        q = q_next
        if res <= tol:
            # q is now T(q_prev); its own residual is at most gamma * res
            v = q.max(axis=1)
            return ExactSolution(v, q, greedy_policy(q, tie_break), res, k, tuple(residuals))
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} steps",
                           residual=residuals[-1])


def policy_value(mdp, policy, tol=1e-12, max_iter=1_000_000):
    """Evaluate ``V^pi`` by fixed-point iteration of ``T^pi``."""
    policy = check_stochastic_rows(policy, "policy")
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValidationError(f"policy shape {policy.shape} != {(mdp.n_states, mdp.n_actions)}")
    r_pi = np.sum(policy * mdp.reward, axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_next = r_pi + mdp.gamma * p_pi @ v
        res = float(np.max(np.abs(v_next - v)))
        v = v_next
        if res <= tol:
            return v
    raise ConvergenceError("policy evaluation did not converge", residual=res)


def sample_transition(mdp, s, a, rng):
    """Draw ``s'`` from ``P(.|s, a)``; the reward is the deterministic ``R(s, a)``."""
    s = check_index(s, mdp.n_states, "state")
    a = check_index(a, mdp.n_actions, "action")
    rng = check_random_state(rng)
    cdf = np.cumsum(mdp.transition[s, a])
    s_next = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(s_next, mdp.n_states - 1), float(mdp.reward[s, a])


def rollout_return(mdp, policy, s0, horizon, rng):
    """Discounted return of one truncated trajectory; a Monte-Carlo oracle."""
    rng = check_random_state(rng)
    policy = np.asarray(policy, dtype=float)
    s, total, disc = s0, 0.0, 1.0
    for _ in range(horizon):
        a = int(np.searchsorted(np.cumsum(policy[s]), rng.random(), side="right"))
        a = min(a, mdp.n_actions - 1)
        s_next, r = sample_transition(mdp, s, a, rng)
        total += disc * r
        disc *= mdp.gamma
        s = s_next
    return total
