"""Coverage quantities and numeric certificates for retrieval-based control.

Everything here is exact over finite state and action sets: total variation
is computed over the action simplex, ``r_M`` and ``Delta_M`` are sups over
the full state set, and values come from tabular policy evaluation.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_random_state
from .exceptions import CertificateViolation, ValidationError
from .mdp import policy_value
from .memory import EpisodicMemory, coverage_radius, memory_distance
from .parzen import ParzenConfig, prior_mapping, prior_matrix
from .reflected import (
    ReflectedMdp,
    composite_policy,
    gibbs_policy,
    log_sum_exp_base,
    soft_optimality_backup,
    soft_policy_iteration,
)

CERT_TOL = 1e-9


def tv_distance(p, q):
    """Total variation ``0.5 * sum |p - q|`` (row-wise for 2-D input)."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError(f"supports differ: {p.shape} vs {q.shape}")
    return 0.5 * np.sum(np.abs(p - q), axis=-1)


def nearest_case_columns(mem, distances):
    """Column of the nearest case per state (ties -> lowest id); 0 (void) if empty."""
    n_states = distances.shape[0]
    if not mem.cases:
        return np.zeros(n_states, dtype=int)
    d = np.asarray(distances)[:, mem.states]
    ids = mem.ids
    cols = np.empty(n_states, dtype=int)
    for s in range(n_states):
        cols[s] = 1 + np.lexsort((ids, d[s]))[0]
    return cols


def deterministic_retrieval(rm, distances=None):
    """One-hot retrieval policy picking the nearest case at every state."""
    distances = rm.kernel.distances if distances is None else distances
    cols = nearest_case_columns(rm.mem, distances)
    mu = np.zeros((rm.n_states, rm.n_columns))
    mu[np.arange(rm.n_states), cols] = 1.0
    return mu


def deterministic_composite(rm, distances=None):
    """``pi_M(a|s) = p(a | s, c_M(s))`` with ``c_M(s)`` the nearest case."""
    return composite_policy(rm, deterministic_retrieval(rm, distances))


def outside_mask(mem, distances):
    """``(n_states, len(mem) + 1)`` mask of retrieval columns outside ``r_M(s)``.

    The void column always counts as outside.
    """
    radii, _ = coverage_radius(mem, distances)
    mask = np.ones((distances.shape[0], len(mem) + 1), dtype=bool)
    if mem.cases:
        mask[:, 1:] = np.asarray(distances)[:, mem.states] > radii[:, None]
    return mask


@dataclass
class DeltaEstimate:
    per_state: np.ndarray
    delta: float
    stderr: np.ndarray = None


def measure_delta_M(rm, mu, distances=None, n_samples=None, rng=None):
    """Probability that retrieval lands outside the coverage radius.

    With ``n_samples=None`` the exact expectation is returned; otherwise each
    state draws ``n_samples`` cases from ``mu`` and the per-state standard
    errors are reported.
    """
    distances = rm.kernel.distances if distances is None else distances
    mu = np.asarray(mu, dtype=float)
    mask = outside_mask(rm.mem, distances)
    if n_samples is None:
        per_state = np.sum(mu * mask, axis=1)
        return DeltaEstimate(per_state, float(per_state.max()), np.zeros_like(per_state))
    if n_samples < 1000:
        raise ValidationError("Monte-Carlo delta_M needs n_samples >= 1000")
    rng = check_random_state(rng)
    per_state = np.empty(rm.n_states)
    for s in range(rm.n_states):
        cols = rng.choice(rm.n_columns, size=n_samples, p=mu[s] / mu[s].sum())
        per_state[s] = mask[s, cols].mean()
    stderr = np.sqrt(per_state * (1 - per_state) / n_samples)
    return DeltaEstimate(per_state, float(per_state.max()), stderr)


@dataclass
class BoundReport:
    """Value-gap certificate for one memory.

    ``slack = bound - value_gap``; the ``*_slack`` fields are the minimum
    slack of the intermediate inequalities (``nan`` when not applicable).
    """

    r_M: float
    delta_M: float
    Delta_M: float
    value_gap: float
    bound: float
    slack: float
    coverage_slack: float = math.nan
    reward_slack: float = math.nan
    per_state: dict = field(default_factory=dict)

    def row(self):
        return {k: v for k, v in asdict(self).items() if k != "per_state"}


def verify_value_bound(rm, oracle, mu=None, distances=None, tol=CERT_TOL, strict=True):
    """Check the value-gap bound ``2 R_max / (1 - gamma)^2 * Delta_M``.

    Also checks the per-state coverage inequality
    ``TV(pi_M, pi*) <= eps(r_M(s)) + delta_M(s)`` (locally consistent kernels
    only) and the reward-level inequality ``|R(s,c) - R^*(s)| <= 2 R_max TV``
    at every ``(s, c)``.

    Parameters
    ----------
    rm : ReflectedMdp
    oracle : ExactSolution
        Solution of the underlying environment.
    mu : ndarray, optional
        Retrieval policy; nearest-case retrieval when omitted.
    strict : bool
        Raise :class:`CertificateViolation` if any inequality fails by more
        than ``tol``.
    """
    env, kernel = rm.env, rm.kernel
    distances = kernel.distances if distances is None else distances
    if mu is None:
        mu = deterministic_retrieval(rm, distances)
    pi_m = composite_policy(rm, mu)
    pi_star = oracle.pi_star
    tv = tv_distance(pi_m, pi_star)
    radii, r_M = coverage_radius(rm.mem, distances)
    delta = measure_delta_M(rm, mu, distances)
    Delta_M = float(tv.max())
    v_m = policy_value(env, pi_m)
    gaps = np.abs(oracle.v_star - v_m)
    value_gap = float(gaps.max())
    r_max = env.r_max
    bound = 2.0 * r_max / (1.0 - env.gamma) ** 2 * Delta_M

    coverage_slack = math.nan
    eps = np.array([kernel.epsilon(r) for r in radii])
    if kernel.kind == "locally_consistent":
        coverage_slack = float(np.min(eps + delta.per_state - tv))
    r_star = np.sum(pi_star * env.reward, axis=1)
    tv_cases = tv_distance(rm.action_probs, np.broadcast_to(pi_star[:, None, :], rm.action_probs.shape))
    reward_slack = float(np.min(2 * r_max * tv_cases - np.abs(rm.reward - r_star[:, None])))

    report = BoundReport(
        r_M, delta.delta, Delta_M, value_gap, bound, bound - value_gap,
        coverage_slack, reward_slack,
        {"radius": radii, "delta": delta.per_state, "tv": tv, "epsilon": eps, "gap": gaps})
    if strict:
        failed = [name for name, s in (("value gap", report.slack),
                                       ("coverage", coverage_slack),
                                       ("reward", reward_slack))
                  if not math.isnan(s) and s < -tol]
        if failed:
            raise CertificateViolation(f"certificate violated: {', '.join(failed)}", report)
    return report


def evenly_spaced_states(n_states, n_cases):
    """``n_cases`` states spread over ``0..n_states-1``; one case sits in the middle."""
    if not 1 <= n_cases <= n_states:
        raise ValidationError(f"cannot place {n_cases} cases on {n_states} states")
    if n_cases == 1:
        return np.array([(n_states - 1) // 2])
    return np.unique(np.round(np.linspace(0, n_states - 1, n_cases)).astype(int))


def memory_at_states(env, states, oracle, void_score=1.0):
    """One case per listed state, storing the optimal action's transition."""
    mem = EpisodicMemory(void_score=void_score)
    for s in states:
        a = int(np.argmax(oracle.pi_star[s]))
        mem.add(s, a, float(env.reward[s, a]), int(np.argmax(env.transition[s, a])))
    return mem


@dataclass
class SweepRow:
    level: int
    n_cases: int
    r_M: float
    delta_M: float
    Delta_M: float
    value_gap: float
    bound: float
    slack: float


SWEEP_COLUMNS = ("level", "n_cases", "r_M", "delta_M", "Delta_M", "value_gap", "bound", "slack")


def coverage_sweep(env, environment, kernel, coverage_levels, oracle, alpha=1.0,
                   parzen=None, strict=True):
    """Certificate table for memories of increasing density.

    Level ``i`` stores ``coverage_levels[i]`` evenly spaced cases; retrieval
    is nearest-case, so ``delta_M`` is zero for non-empty memories.
    """
    levels = [int(n) for n in coverage_levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValidationError("coverage levels must be strictly increasing")
    parzen = parzen or ParzenConfig()
    rows = []
    for i, n in enumerate(levels):
        mem = memory_at_states(env, evenly_spaced_states(env.n_states, n), oracle,
                               parzen.void_score)
        prior = prior_matrix(mem, environment.embedding, parzen)
        rm = ReflectedMdp(env, mem, kernel, prior, alpha)
        rep = verify_value_bound(rm, oracle, strict=strict)
        rows.append(SweepRow(i, len(mem), rep.r_M, rep.delta_M, rep.Delta_M,
                             rep.value_gap, rep.bound, rep.slack))
    return rows


# Lipschitz quantities of the soft backup in the base measure


def soft_max_value(b, q, alpha):
    """``alpha * log sum_c b(c) exp(q(c) / alpha)``."""
    return log_sum_exp_base(b, q, alpha)


def lse_constants(q, alpha):
    """``(alpha e^{D/alpha}, 2 e^{D/alpha})`` with ``D`` the range of ``q``."""
    span = float(np.max(q) - np.min(q))
    g = math.exp(span / alpha)
    return alpha * g, 2.0 * g


@dataclass
class LipschitzEstimate:
    """Fixed-point sensitivity to single-case memory changes.

    ``fp_ratio`` is the worst ``||Q*_{M'} - Q*_M||_inf / ||M' - M||``;
    ``L_F`` is the worst drift ratio ``||T_{M'} Z - T_M Z||_inf / ||M' - M||``
    over the probe tables; ``mu_ratio`` tracks the retrieval policies the
    same way (reported only).
    """

    kappa: float
    L_F: float
    fp_ratio: float
    mu_ratio: float
    ratios: list = field(default_factory=list)
    distances: list = field(default_factory=list)

    @property
    def certified_ratio(self):
        return self.L_F / (1.0 - self.kappa)


def _universe_problem(env, kernel, embedding, parzen, alpha, mem, universe):
    """Reflected problem over ``universe``'s columns with ``mem``'s base measure.

    Columns of cases outside ``mem`` get zero prior mass, so the soft backup
    ignores them while their values stay defined.
    """
    prior = np.zeros((env.n_states, len(universe) + 1))
    own = prior_matrix(mem, embedding, parzen)
    cols = [0] + [1 + universe.ids.tolist().index(i) for i in mem.ids]
    prior[:, cols] = own
    return ReflectedMdp(env, universe, kernel, prior, alpha)


def _union(m1, m2):
    seen = {c.id for c in m1.cases}
    return EpisodicMemory(m1.cases + [c for c in m2.cases if c.id not in seen], m1.void_score)


def perturb_memory(mem, env, rng, weight=None):
    """Single-case change: add a random transition or drop a random case."""
    new = mem.copy()
    if new.cases and rng.random() < 0.5:
        new.cases.pop(int(rng.integers(len(new))))
        return new
    s = int(rng.integers(env.n_states))
    a = int(rng.integers(env.n_actions))
    s2 = int(rng.choice(env.n_states, p=env.transition[s, a]))
    new.add(s, a, float(env.reward[s, a]), s2,
            weight=float(rng.uniform(0.2, 2.0)) if weight is None else weight)
    return new


def fixed_point_lipschitz_probe(env, environment, kernel, base_memory, n_perturbations=50,
                                rng=None, alpha=1.0, parzen=None, n_probes=5,
                                perturbations=None):
    """Compare fixed-point movement with the drift bound ``L_F / (1 - gamma)``.

    Each perturbed pair ``(M, M')`` is solved on the union of their cases, so
    both soft-optimality operators act on the same table space and contract
    with modulus ``gamma``. The drift is probed at ``Q*_M`` and at
    ``n_probes`` random tables around it.
    """
    rng = check_random_state(rng)
    parzen = parzen or ParzenConfig()
    if len(base_memory) == 0:
        raise ValidationError("the base memory must hold at least one case")
    build = prior_mapping(environment.embedding, parzen)
    states = range(env.n_states)
    if perturbations is None:
        perturbations = [perturb_memory(base_memory, env, rng) for _ in range(n_perturbations)]
    L_F = fp_ratio = mu_ratio = 0.0
    ratios, dists = [], []
    for new in perturbations:
        d = memory_distance(base_memory, new, build, states)
        universe = _union(base_memory, new)
        rm0 = _universe_problem(env, kernel, environment.embedding, parzen, alpha,
                                base_memory, universe)
        rm1 = _universe_problem(env, kernel, environment.embedding, parzen, alpha, new, universe)
        q0, mu0, _ = soft_policy_iteration(rm0)
        q1, mu1, _ = soft_policy_iteration(rm1)
        dq = float(np.max(np.abs(q1 - q0)))
        dmu = float(np.max(tv_distance(mu1, mu0)))
        dists.append(d)
        if d == 0.0:
            ratios.append(0.0)
            continue
        probes = [q0] + [q0 + rng.normal(scale=1.0, size=q0.shape) for _ in range(n_probes)]
        for z in probes:
            drift = np.max(np.abs(soft_optimality_backup(rm1, z) - soft_optimality_backup(rm0, z)))
            L_F = max(L_F, float(drift) / d)
        ratios.append(dq / d)
        fp_ratio = max(fp_ratio, dq / d)
        mu_ratio = max(mu_ratio, dmu / d)
    return LipschitzEstimate(env.gamma, L_F, fp_ratio, mu_ratio, ratios, dists)


def gibbs_target(b, q, alpha):
    return gibbs_policy(b, q, alpha)

