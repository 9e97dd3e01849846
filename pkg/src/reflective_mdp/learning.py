"""Online read-write learning on two timescales.

Fast variables: the retrieval value table ``Q`` (TD updates) and the
retrieval policy ``mu`` (relaxation towards the KL-greedy target), both with
step ``eta_t``. Slow variable: the episodic memory, written with probability
``rho_t``. Columns of ``Q`` and ``mu`` follow ``[void] + memory.cases``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_random_state
from .exceptions import ValidationError
from .llm_kernel import case_column, distribution_table
from .mdp import policy_value
from .memory import VOID_ID, EpisodicMemory, WritePolicy, apply_write
from .parzen import ParzenConfig, bandwidth, prior_matrix
from .reflected import (
    ReflectedMdp,
    kl_divergence,
    log_sum_exp_base,
    masked_log,
    soft_policy_iteration,
)

TARGET_MODES = ("lse", "expected-kl")


@dataclass(frozen=True)
class StepSchedule:
    """``t -> base / (t + offset) ** exponent``."""

    base: float = 1.0
    offset: float = 1.0
    exponent: float = 0.7

    def __post_init__(self):
        if self.base <= 0 or self.offset <= 0:
            raise ValidationError("schedule base and offset must be positive")

    def __call__(self, t):
        return self.base / (t + self.offset) ** self.exponent

    def to_dict(self):
        return {"base": self.base, "offset": self.offset, "exponent": self.exponent}


DEFAULT_ETA = StepSchedule(1.0, 1.0, 0.7)
DEFAULT_RHO = StepSchedule(0.3, 1.0, 0.95)


def validate_schedules(eta, rho):
    """Refuse schedules that break the two-timescale step-size conditions."""
    if not 0.5 < eta.exponent <= 1.0:
        raise ValidationError(f"eta exponent must lie in (0.5, 1], got {eta.exponent}")
    if rho is not None and rho.exponent <= eta.exponent:
        raise ValidationError("rho must decay strictly faster than eta (rho/eta -> 0)")
    if rho is not None and rho.exponent > 1.0:
        raise ValidationError("rho exponent must be <= 1 so that sum rho_t diverges")


class ZeroSchedule:
    """``rho = 0``: memory frozen at its initial contents."""

    exponent = math.inf

    def __call__(self, t):
        return 0.0

    def to_dict(self):
        return {"base": 0.0, "offset": 1.0, "exponent": None}


@dataclass
class LearnerState:
    """Everything the learner carries from one step to the next.

    ``prior``, ``log_prior`` and ``action_probs`` are caches derived from
    ``mem`` and rebuilt whenever the memory changes.
    """

    q: np.ndarray
    mu: np.ndarray
    mem: EpisodicMemory
    t: int
    rng: np.random.Generator
    env_state: int
    case_ids: list
    prior: np.ndarray = None
    log_prior: np.ndarray = None
    action_probs: np.ndarray = None
    mem_version: int = 0

    def column(self, case_id):
        try:
            return self.case_ids.index(case_id)
        except ValueError:
            return None


@dataclass
class TrackingDiagnostics:
    t: list = field(default_factory=list)
    td_error: list = field(default_factory=list)
    memory_size: list = field(default_factory=list)
    tracking_error: list = field(default_factory=list)
    value_gap: list = field(default_factory=list)

    def record(self, t, td_error, memory_size, tracking=math.nan, gap=math.nan):
        self.t.append(t)
        self.td_error.append(td_error)
        self.memory_size.append(memory_size)
        self.tracking_error.append(tracking)
        self.value_gap.append(gap)

    def rows(self):
        return zip(self.t, self.td_error, self.tracking_error, self.memory_size, self.value_gap)

    def sampled(self):
        """``(t, tracking_error, value_gap)`` at the steps where the oracle ran."""
        t = np.asarray(self.t)
        err = np.asarray(self.tracking_error, dtype=float)
        keep = ~np.isnan(err)
        return t[keep], err[keep], np.asarray(self.value_gap, dtype=float)[keep]


@dataclass
class LearnerSetup:
    """Static ingredients of a learning run."""

    env: object
    distances: np.ndarray
    embedding: object
    kernel: object
    parzen: ParzenConfig
    alpha: float
    target_mode: str = "lse"

    def prior_for(self, mem, t):
        return prior_matrix(mem, self.embedding, self.parzen, t)


def refresh_caches(state, setup):
    state.prior = setup.prior_for(state.mem, state.t)
    state.log_prior = masked_log(state.prior)
    state.mem_version += 1


def td_target(state, setup, r, s_next, mode=None):
    """Sample target ``r + gamma * (soft value of s_next)`` under the cached prior."""
    mode = mode or setup.target_mode
    gamma, alpha = setup.env.gamma, setup.alpha
    qn, pn = state.q[s_next], state.prior[s_next]
    if mode == "lse":
        return r + gamma * float(log_sum_exp_base(pn, qn, alpha))
    mun = state.mu[s_next]
    return r + gamma * (float(mun @ qn) - alpha * float(kl_divergence(mun, pn)))


def td_update(state, setup, transition, eta, mode=None):
    """TD step on the single entry ``(s_t, c_t)``; returns the TD error.

    ``transition`` is ``(s_t, c_t, r_t, s_{t+1})`` with ``c_t`` a case id.
    """
    s, case_id, r, s_next = transition
    col = state.column(case_id)
    if col is None:
        raise ValidationError(f"case {case_id} has no column in the value table")
    delta = td_target(state, setup, r, s_next, mode) - state.q[s, col]
    state.q[s, col] += eta * delta
    return delta


def kl_greedy_row(state, setup, s):
    z = state.log_prior[s] + state.q[s] / setup.alpha
    w = np.exp(z - z.max())
    return w / w.sum()


def policy_update(state, setup, s, eta):
    """Relax ``mu(.|s)`` towards the KL-greedy target by a step ``eta``."""
    target = kl_greedy_row(state, setup, s)
    state.mu[s] += eta * (target - state.mu[s])
    return state.mu[s]


def expected_td_error(state, setup, s, case_id, mode=None):
    """Exact conditional mean of the TD error for a frozen memory."""
    col = state.column(case_id)
    env = setup.env
    p_a = state.action_probs[s, col]
    next_val = np.array([td_target(state, setup, 0.0, s2, mode) for s2 in range(env.n_states)])
    return float(p_a @ (env.reward[s] + env.transition[s] @ next_val)) - state.q[s, col]


def _smoothed_column(state, setup, case_state, h):
    """Initial Q column for a new case: kernel-weighted mean of its 3 nearest cases."""
    cases = state.mem.cases[:-1]
    if not cases:
        return np.zeros(state.q.shape[0])
    d = np.array([setup.distances[case_state, c.s] for c in cases])
    ids = np.array([c.id for c in cases])
    nearest = np.lexsort((ids, d))[:3]
    w = np.exp(-0.5 * (d[nearest] / h) ** 2)
    if w.sum() <= 0:
        w = np.ones(len(nearest))
    cols = nearest + 1
    return state.q[:, cols] @ (w / w.sum())


def _apply_memory_change(state, setup, added, evicted):
    n_states = state.q.shape[0]
    if evicted is not None:
        col = state.column(evicted.id)
        state.q = np.delete(state.q, col, axis=1)
        state.mu = np.delete(state.mu, col, axis=1)
        state.mu /= state.mu.sum(axis=1, keepdims=True)
        state.action_probs = np.delete(state.action_probs, col, axis=1)
        del state.case_ids[col]
    if added is not None:
        h = bandwidth(len(state.mem), setup.embedding.dim, setup.parzen, state.t)
        new_q = _smoothed_column(state, setup, added.s, h)
        added.q_estimate = float(new_q[added.s])
        state.q = np.hstack([state.q, new_q[:, None]])
        state.mu = np.hstack([state.mu, np.zeros((n_states, 1))])
        state.action_probs = np.concatenate(
            [state.action_probs, case_column(setup.kernel, added)[:, None, :]], axis=1)
        state.case_ids.append(added.id)
    refresh_caches(state, setup)


def initial_state(setup, mem, seed, s0=0):
    mem = mem.copy()
    n_states = setup.env.n_states
    state = LearnerState(
        q=np.zeros((n_states, len(mem) + 1)), mu=None, mem=mem, t=0,
        rng=check_random_state(seed), env_state=s0, case_ids=[VOID_ID, *mem.ids.tolist()])
    refresh_caches(state, setup)
    state.mu = state.prior.copy()
    state.action_probs = distribution_table(setup.kernel, mem)
    return state


def sync_q_estimates(state):
    """Copy ``Q(s(c), c)`` into each case's ``q_estimate``."""
    for j, case in enumerate(state.mem.cases, start=1):
        case.q_estimate = float(state.q[case.s, j])


@dataclass
class Oracle:
    q: np.ndarray
    mu: np.ndarray
    version: int


def solve_oracle(state, setup):
    rm = ReflectedMdp(setup.env, state.mem, setup.kernel, state.prior, setup.alpha)
    q, mu, _ = soft_policy_iteration(rm)
    return Oracle(q, mu, state.mem_version)


def tracking_error(state, oracle):
    """``||Q - Q*||_inf + max_x TV(mu(.|x), mu*(.|x))`` against a frozen-memory oracle."""
    if oracle.q.shape != state.q.shape:
        raise ValidationError("oracle was solved for a different memory")
    return float(np.max(np.abs(state.q - oracle.q))
                 + 0.5 * np.max(np.sum(np.abs(state.mu - oracle.mu), axis=1)))


def composite_value_gap(state, setup, v_star):
    pi = np.einsum("sc,sca->sa", state.mu, state.action_probs)
    pi /= pi.sum(axis=1, keepdims=True)
    return float(np.max(np.abs(v_star - policy_value(setup.env, pi))))


def _draw(cdf_row, u):
    return min(int(np.searchsorted(cdf_row, u * cdf_row[-1], side="right")), len(cdf_row) - 1)


def learn(setup, eta=DEFAULT_ETA, write_policy=None, horizon=10_000, seed=0,
          initial_memory=None, restart_prob=0.1, oracle_every=500, v_star=None, s0=0,
          validate=True):
    """Run the read-write loop for ``horizon`` steps.

    Each step: relax ``mu(.|s_t)`` towards its KL-greedy target, sample a case
    ``c_t ~ mu(.|s_t)`` and an action ``a_t ~ p(.|s_t, c_t)``, step the
    environment, write ``(s_t, a_t, r_t, s_{t+1})`` with probability
    ``rho_t``, then TD-update ``Q(s_t, c_t)`` against the prior of the new
    memory. With probability ``restart_prob`` the next state is redrawn
    uniformly, which keeps every state visited.

    Every ``oracle_every`` steps the tracking error against the frozen-memory
    fixed point (and, if ``v_star`` is given, the composite policy's value
    gap) is recorded.

    Returns ``(LearnerState, TrackingDiagnostics)``.
    """
    if setup.target_mode not in TARGET_MODES:
        raise ValidationError(f"target_mode must be one of {TARGET_MODES}")
    write_policy = write_policy or WritePolicy("replay", ZeroSchedule())
    if validate:
        rho = write_policy.rho_schedule
        validate_schedules(eta, None if isinstance(rho, ZeroSchedule) else rho)
    if not 0.0 <= restart_prob <= 1.0:
        raise ValidationError("restart_prob must lie in [0, 1]")
    mem = initial_memory if initial_memory is not None else EpisodicMemory(
        void_score=setup.parzen.void_score)
    state = initial_state(setup, mem, seed, s0)
    diag = TrackingDiagnostics()
    env = setup.env
    n_states = env.n_states
    trans_cdf = np.cumsum(env.transition, axis=2)
    weighted = write_policy.scheme == "importance_weighted"
    adaptive = setup.parzen.bandwidth_mode == "adaptive"
    rng = state.rng
    oracle = None
    block = np.empty((0, 6))
    for _ in range(horizon):
        if len(block) == 0:
            block = rng.random((4096, 6))
        u, block = block[0], block[1:]
        t, s = state.t, state.env_state
        eta_t = eta(t)
        if adaptive:
            refresh_caches(state, setup)
        policy_update(state, setup, s, eta_t)
        col = _draw(np.cumsum(state.mu[s]), u[0])
        case_id = state.case_ids[col]
        a = _draw(np.cumsum(state.action_probs[s, col]), u[1])
        s_next = _draw(trans_cdf[s, a], u[2])
        r = float(env.reward[s, a])

        weight = 1.0
        if weighted:
            weight = abs(td_target(state, setup, r, s_next) - state.q[s, col])
        added, evicted = apply_write(state.mem, write_policy, t, (s, a, r, s_next),
                                     _Uniform(u[3]), weight)
        if added is not None or evicted is not None:
            _apply_memory_change(state, setup, added, evicted)

        delta = math.nan
        if state.column(case_id) is not None:
            delta = td_update(state, setup, (s, case_id, r, s_next), eta_t)

        state.t = t + 1
        state.env_state = min(int(n_states * u[5]), n_states - 1) if u[4] < restart_prob \
            else s_next
        tracking = gap = math.nan
        if oracle_every and state.t % oracle_every == 0:
            if oracle is None or oracle.version != state.mem_version:
                oracle = solve_oracle(state, setup)
            tracking = tracking_error(state, oracle)
            if v_star is not None:
                gap = composite_value_gap(state, setup, v_star)
        diag.record(state.t, float(delta), len(state.mem), tracking, gap)
    sync_q_estimates(state)
    return state, diag


class _Uniform:
    """Feeds one pre-drawn uniform to :func:`apply_write`."""

    def __init__(self, u):
        self._u = u

    def random(self):
        return self._u


class ReadWriteLearner(BaseEstimator):
    """Estimator wrapper around :func:`learn`.

    Parameters
    ----------
    alpha : float
    parzen : ParzenConfig
    eta, rho : StepSchedule
        Fast and slow step sizes; ``rho=None`` freezes the memory.
    write_scheme : {"replay", "sliding_window", "importance_weighted"}
    capacity : int, optional
    target_mode : {"lse", "expected-kl"}
    horizon : int
    restart_prob : float
    oracle_every : int
    random_state : int
    """

    def __init__(self, alpha=1.0, parzen=None, eta=DEFAULT_ETA, rho=DEFAULT_RHO,
                 write_scheme="replay", capacity=None, target_mode="lse", horizon=10_000,
                 restart_prob=0.1, oracle_every=500, random_state=0):
        self.alpha = alpha
        self.parzen = parzen
        self.eta = eta
        self.rho = rho
        self.write_scheme = write_scheme
        self.capacity = capacity
        self.target_mode = target_mode
        self.horizon = horizon
        self.restart_prob = restart_prob
        self.oracle_every = oracle_every
        self.random_state = random_state

    def fit(self, mdp, environment=None, kernel=None, initial_memory=None, v_star=None):
        if environment is None or kernel is None:
            raise ValidationError("fit needs the environment (embedding) and the action kernel")
        setup = LearnerSetup(mdp, environment.distances, environment.embedding, kernel,
                             self.parzen or ParzenConfig(), self.alpha, self.target_mode)
        rho = ZeroSchedule() if self.rho is None else self.rho
        policy = WritePolicy(self.write_scheme, rho, self.capacity)
        self.state_, self.diagnostics_ = learn(
            setup, self.eta, policy, self.horizon, self.random_state, initial_memory,
            self.restart_prob, self.oracle_every, v_star)
        self.memory_ = self.state_.mem
        self.setup_ = setup
        return self

    def predict_proba(self, states):
        """Composite environment-action distribution at ``states``."""
        check_is_fitted(self, "state_")
        st = self.state_
        pi = np.einsum("sc,sca->sa", st.mu, st.action_probs)
        return pi[np.asarray(states, dtype=int)]

    def predict(self, states):
        return np.argmax(self.predict_proba(states), axis=1)
