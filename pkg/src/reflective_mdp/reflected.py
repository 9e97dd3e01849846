"""Retrieval control on a frozen memory: KL-regularised soft policy iteration.

With the memory held fixed, the augmented state ``x = (s, M)`` reduces to the
environment state ``s`` and the retrieval actions are the columns
``[void, case_1, ..., case_N]``. The action kernel is folded into an induced
reward ``R(s, c) = sum_a p(a|s,c) R(s,a)`` and an induced transition
``P(s'|s, c) = sum_a p(a|s,c) P(s'|s,a)``.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive, check_stochastic_rows
from .exceptions import ConvergenceError, ValidationError
from .llm_kernel import distribution_table
from .mdp import TabularMdp
from .memory import VOID_ID
from .parzen import prior_matrix


def masked_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def log_sum_exp_base(prior, q, alpha):
    """Row-wise ``alpha * log sum_c prior(c) exp(q(c) / alpha)``, computed stably.

    Entries with zero prior mass are ignored.
    """
    z = masked_log(prior) + np.asarray(q) / alpha
    m = np.max(z, axis=-1, keepdims=True)
    return alpha * (np.squeeze(m, -1) + np.log(np.sum(np.exp(z - m), axis=-1)))


def kl_divergence(nu, mu0):
    """Row-wise ``KL(nu || mu0)`` with ``0 log 0 = 0``; ``inf`` off the support."""
    nu, mu0 = np.asarray(nu, dtype=float), np.asarray(mu0, dtype=float)
    pos = nu > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, nu * (np.log(np.where(pos, nu, 1.0)) - masked_log(mu0)), 0.0)
    return np.sum(terms, axis=-1)


def gibbs_policy(prior, q, alpha):
    """Exponential tilting ``mu+ ∝ prior * exp(q / alpha)`` with max subtraction."""
    z = masked_log(prior) + np.asarray(q) / alpha
    z = z - np.max(z, axis=-1, keepdims=True)
    w = np.exp(z)
    return w / np.sum(w, axis=-1, keepdims=True)


class ReflectedMdp:
    """Induced control problem over retrieval actions for a frozen memory.

    Parameters
    ----------
    env : TabularMdp
    mem : EpisodicMemory
        Frozen for the lifetime of this object.
    kernel : LlmKernel
    prior : ndarray of shape (n_states, len(mem) + 1)
        Base measure rows, void in column 0.
    alpha : float
        KL temperature.
    """

    def __init__(self, env, mem, kernel, prior, alpha):
        self.env = env
        self.mem = mem
        self.kernel = kernel
        self.alpha = check_positive(alpha, "alpha")
        self.case_ids = [VOID_ID, *mem.ids.tolist()]
        prior = check_stochastic_rows(np.array(prior, dtype=float), "prior")
        if prior.shape != (env.n_states, len(self.case_ids)):
            raise ValidationError(f"prior shape {prior.shape} != {(env.n_states, len(self.case_ids))}")
        if np.any(prior[:, 0] <= 0):
            raise ValidationError("prior must give the void case positive mass at every state")
        self.prior = prior
        self.action_probs = distribution_table(kernel, mem)
        self.reward = np.einsum("sca,sa->sc", self.action_probs, env.reward)
        self.transition = np.einsum("sca,sat->sct", self.action_probs, env.transition)
        self._col = {cid: j for j, cid in enumerate(self.case_ids)}

    @classmethod
    def build(cls, env, mem, kernel, embedding, parzen_cfg, alpha, t=0):
        return cls(env, mem, kernel, prior_matrix(mem, embedding, parzen_cfg, t), alpha)

    @property
    def gamma(self):
        return self.env.gamma

    @property
    def n_states(self):
        return self.env.n_states

    @property
    def n_columns(self):
        return len(self.case_ids)

    def column(self, case_id):
        try:
            return self._col[case_id]
        except KeyError:
            raise ValidationError(f"unknown case id {case_id!r}") from None

    def as_tabular_mdp(self):
        """The induced problem as a plain MDP whose actions are retrieval columns."""
        return TabularMdp(self.transition, self.reward, self.gamma)

    def soft_value_bound(self):
        return self.env.r_max / (1.0 - self.gamma) + self.alpha * np.log(len(self.mem) + 1)


@dataclass
class RetrievalValueTable:
    q: np.ndarray
    n_iter: int = 0
    residual: float = 0.0
    residuals: list = field(default_factory=list)


def induced_reward(rm, s, case_id):
    return float(rm.reward[s, rm.column(case_id)])


def induced_transition(rm, s, case_id):
    return rm.transition[s, rm.column(case_id)].copy()


def check_retrieval_policy(rm, mu):
    mu = check_stochastic_rows(np.asarray(mu, dtype=float), "retrieval policy")
    if mu.shape != rm.prior.shape:
        raise ValidationError(f"retrieval policy shape {mu.shape} != {rm.prior.shape}")
    if np.any((mu > 0) & (rm.prior <= 0)):
        raise ValidationError("retrieval policy puts mass off the prior's support (KL = inf)")
    return mu


def soft_state_value(rm, mu, q):
    """``V(x) = sum_c mu(c|x) Q(x,c) - alpha KL(mu(.|x) || mu0(.|x))``."""
    return np.sum(mu * q, axis=1) - rm.alpha * kl_divergence(mu, rm.prior)


def kl_evaluation_backup(rm, mu, q):
    """One application of the KL-regularised evaluation operator for ``mu``."""
    return rm.reward + rm.gamma * rm.transition @ soft_state_value(rm, mu, q)


def kl_evaluate(rm, mu, tol=1e-12, max_iter=1_000_000, q0=None):
    """Fixed point of the KL-regularised evaluation operator by iteration.

    The returned table satisfies ``||Q - T Q||_inf <= tol``.
    """
    mu = check_retrieval_policy(rm, mu)
    q = np.zeros_like(rm.reward) if q0 is None else np.array(q0, dtype=float)
    residuals = []
    for k in range(1, max_iter + 1):
        q_next = kl_evaluation_backup(rm, mu, q)
        res = float(np.max(np.abs(q_next - q)))
        residuals.append(res)
        q = q_next
        if res <= tol:
            return RetrievalValueTable(q, k, res, residuals)
    raise ConvergenceError(f"KL evaluation stalled at residual {res:.3e}", residual=res)


def kl_improve(rm, q):
    """Closed-form KL-greedy retrieval policy ``mu+ ∝ mu0 exp(Q / alpha)``."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValidationError("Q table has non-finite entries")
    return gibbs_policy(rm.prior, q, rm.alpha)


def soft_optimality_backup(rm, q):
    """``(T* Q)(x, c) = R(x, c) + gamma E[alpha log sum_c' mu0 exp(Q(x', c')/alpha)]``."""
    return rm.reward + rm.gamma * rm.transition @ log_sum_exp_base(rm.prior, q, rm.alpha)


def soft_value_iteration(rm, tol=1e-12, max_iter=1_000_000):
    """Direct fixed-point iteration of the soft optimality operator."""
    q = np.zeros_like(rm.reward)
    for _ in range(max_iter):
        q_next = soft_optimality_backup(rm, q)
        res = float(np.max(np.abs(q_next - q)))
        q = q_next
        if res <= tol:
            return q
    raise ConvergenceError("soft value iteration did not converge", residual=res)


@dataclass
class OuterStep:
    outer_iter: int
    sup_q_change: float
    min_monotonicity_slack: float
    v_soft_max: float
    v: np.ndarray
    gibbs_gap: float
    eval_iters: int


def soft_policy_iteration(rm, tol=1e-8, max_outer=500, eval_tol=1e-12):
    """Alternate exact KL evaluation and closed-form improvement.

    Starts from the prior itself as the retrieval policy. Stops once the
    evaluated Q changes by at most ``tol`` in sup-norm between consecutive
    outer steps. Returns ``(Q, mu, trace)`` where ``mu`` is the improvement of
    the final ``Q`` and each trace entry records the soft value of the policy
    evaluated at that step.
    """
    mu = rm.prior.copy()
    table = kl_evaluate(rm, mu, eval_tol)
    v = soft_state_value(rm, mu, table.q)
    trace = [OuterStep(0, np.inf, np.inf, float(v.max()), v, 0.0, table.n_iter)]
    for k in range(1, max_outer + 1):
        mu = kl_improve(rm, table.q)
        gibbs = soft_state_value(rm, mu, table.q) - log_sum_exp_base(rm.prior, table.q, rm.alpha)
        new = kl_evaluate(rm, mu, eval_tol, q0=table.q)
        v_new = soft_state_value(rm, mu, new.q)
        change = float(np.max(np.abs(new.q - table.q)))
        trace.append(OuterStep(k, change, float(np.min(v_new - v)), float(v_new.max()), v_new,
                               float(np.max(np.abs(gibbs))), new.n_iter))
        table, v = new, v_new
        if change <= tol:
            return table.q, kl_improve(rm, table.q), trace
    raise ConvergenceError(f"soft policy iteration exceeded {max_outer} outer steps",
                           residual=change, trace=trace)


def composite_policy(rm, mu):
    """Environment-action distribution ``pi(a|s) = sum_c mu(c|s) p(a|s,c)``."""
    mu = check_stochastic_rows(np.asarray(mu, dtype=float), "retrieval policy")
    return np.einsum("sc,sca->sa", mu, rm.action_probs)


class SoftPolicyIteration(BaseEstimator):
    """Estimator wrapper around :func:`soft_policy_iteration`.

    Parameters
    ----------
    tol : float
        Outer stopping threshold on the sup-norm change of Q.
    max_outer : int
    eval_tol : float
        Residual target of each inner KL evaluation.

    Attributes
    ----------
    q_ : ndarray of shape (n_states, n_columns)
    mu_ : ndarray of shape (n_states, n_columns)
    trace_ : list of OuterStep
    n_iter_ : int
    case_ids_ : list of int
    """

    def __init__(self, tol=1e-8, max_outer=500, eval_tol=1e-12):
        self.tol = tol
        self.max_outer = max_outer
        self.eval_tol = eval_tol

    def fit(self, rm, y=None):
        self.q_, self.mu_, self.trace_ = soft_policy_iteration(rm, self.tol, self.max_outer,
                                                               self.eval_tol)
        self.n_iter_ = len(self.trace_) - 1
        self.case_ids_ = list(rm.case_ids)
        self.composite_ = composite_policy(rm, self.mu_)
        return self

    def predict_proba(self, states):
        """Retrieval distribution for each state."""
        check_is_fitted(self, "mu_")
        return self.mu_[np.asarray(states, dtype=int)]

    def predict(self, states):
        """Most probable case id for each state."""
        cols = np.argmax(self.predict_proba(states), axis=1)
        return np.asarray(self.case_ids_)[cols]
