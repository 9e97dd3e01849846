import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from conftest import batch_returns, reflected_instance
from reflective_mdp.environments import chain
from reflective_mdp.exceptions import ConvergenceError, ValidationError
from reflective_mdp.llm_kernel import LlmKernel
from reflective_mdp.mdp import TabularMdp, policy_value, value_iteration
from reflective_mdp.memory import VOID_ID, EpisodicMemory
from reflective_mdp.reflected import (
    ReflectedMdp,
    SoftPolicyIteration,
    composite_policy,
    induced_reward,
    induced_transition,
    kl_divergence,
    kl_evaluate,
    kl_evaluation_backup,
    kl_improve,
    log_sum_exp_base,
    soft_optimality_backup,
    soft_policy_iteration,
    soft_state_value,
    soft_value_iteration,
)


def copy_problem(mdp, cases, alpha=1.0, prior=None):
    """Copy-action kernel: case columns are point masses, void is uniform."""
    mem = EpisodicMemory()
    for s, a in cases:
        mem.add(s, a, 0.0, s)
    d = np.zeros((mdp.n_states, mdp.n_states))
    kernel = LlmKernel("copy_action", np.full((mdp.n_states, mdp.n_actions), 1 / mdp.n_actions), d)
    if prior is None:
        prior = np.full((mdp.n_states, len(cases) + 1), 1.0 / (len(cases) + 1))
    return ReflectedMdp(mdp, mem, kernel, prior, alpha)


def bandit(rewards, gamma=0.0):
    n = len(rewards)
    return TabularMdp(np.ones((1, n, 1)), np.array([rewards], dtype=float), gamma)


# induced reward / transition

def test_induced_reward_examples():
    rm = copy_problem(bandit([1.0, 3.0]), [(0, 1)])
    case_id = rm.case_ids[1]
    assert induced_reward(rm, 0, case_id) == 3.0
    assert induced_reward(rm, 0, VOID_ID) == 2.0
    zero = copy_problem(bandit([0.0, 0.0]), [(0, 1)])
    assert np.all(zero.reward == 0.0)
    with pytest.raises(ValidationError):
        induced_reward(rm, 0, 999)


def test_induced_transition_examples():
    mdp, _ = chain(3)
    rm = copy_problem(mdp, [(1, 1)])
    np.testing.assert_array_equal(induced_transition(rm, 1, rm.case_ids[1]), [0, 0, 1])
    np.testing.assert_array_equal(induced_transition(rm, 1, VOID_ID), [0.5, 0, 0.5])
    with pytest.raises(ValidationError):
        induced_transition(rm, 1, 42)


def test_induced_tables_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rm, _, _ = reflected_instance(rng)
        assert np.all(np.abs(rm.reward) <= rm.env.r_max + 1e-12)
        np.testing.assert_allclose(rm.transition.sum(axis=2), 1.0, atol=1e-12)


def test_prior_validation():
    mdp, _ = chain(3)
    with pytest.raises(ValidationError):
        copy_problem(mdp, [(0, 0)], prior=np.tile([0.0, 1.0], (3, 1)))
    with pytest.raises(ValidationError):
        copy_problem(mdp, [(0, 0)], prior=np.full((3, 3), 1 / 3))


# KL evaluation

def test_myopic_evaluation_is_reward():
    rm, _, _ = reflected_instance(np.random.default_rng(1), gamma=0.0, n_cases=5)
    assert rm.gamma == 0.0
    table = kl_evaluate(rm, rm.prior)
    np.testing.assert_array_equal(table.q, rm.reward)


def test_prior_policy_matches_plain_evaluation():
    rm, _, _ = reflected_instance(np.random.default_rng(2), n_states=10, n_cases=6, gamma=0.9)
    q = kl_evaluate(rm, rm.prior).q
    # with mu = mu0 the KL term vanishes: plain evaluation on the induced MDP
    v = policy_value(rm.as_tabular_mdp(), rm.prior)
    np.testing.assert_allclose(q, rm.reward + rm.gamma * rm.transition @ v, atol=1e-9)


def test_evaluation_residuals_contract():
    rm, _, _ = reflected_instance(np.random.default_rng(3), gamma=0.9, n_cases=8)
    mu = np.random.default_rng(0).dirichlet(np.ones(rm.n_columns), size=rm.n_states)
    table = kl_evaluate(rm, mu)
    res = table.residuals
    assert table.residual <= 1e-12 and table.n_iter == len(res)
    assert all(b <= rm.gamma * a + 1e-12 for a, b in zip(res, res[1:]))
    backup = kl_evaluation_backup(rm, mu, table.q)
    assert np.max(np.abs(backup - table.q)) <= 1e-12 * (1 + 1 / (1 - rm.gamma))


def test_support_violation_rejected():
    mdp, _ = chain(3)
    prior = np.tile([0.5, 0.5, 0.0], (3, 1))
    rm = copy_problem(mdp, [(0, 0), (2, 1)], prior=prior)
    with pytest.raises(ValidationError):
        kl_evaluate(rm, np.full((3, 3), 1 / 3))
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == np.inf
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_evaluation_nonconvergence_reports_residual():
    rm, _, _ = reflected_instance(np.random.default_rng(4), gamma=0.99, n_cases=3)
    with pytest.raises(ConvergenceError) as info:
        kl_evaluate(rm, rm.prior, max_iter=5)
    assert info.value.residual > 0


# improvement

def test_improve_examples():
    alpha = 0.7
    mdp = bandit([0.0])
    rm = copy_problem(mdp, [(0, 0)], alpha=alpha)
    mu = kl_improve(rm, np.array([[alpha * np.log(2.0), 0.0]]))
    np.testing.assert_allclose(mu, [[2 / 3, 1 / 3]], atol=1e-12)
    rm2, _, _ = reflected_instance(np.random.default_rng(5), n_cases=6)
    const = np.full(rm2.prior.shape, 3.7)
    np.testing.assert_allclose(kl_improve(rm2, const), rm2.prior, atol=1e-12)
    with pytest.raises(ValidationError):
        kl_improve(rm2, np.full(rm2.prior.shape, np.nan))


def test_greedy_limit():
    rng = np.random.default_rng(6)
    rm, _, _ = reflected_instance(rng, n_cases=10, alpha=1e-6)
    q = rng.normal(size=rm.prior.shape)
    mu = kl_improve(rm, q)
    best = np.argmax(q, axis=1)
    off = 1.0 - mu[np.arange(rm.n_states), best]
    assert np.all(off <= 1e-3)
    np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-12)


def test_gibbs_identity_and_discovery():
    rng = np.random.default_rng(7)
    for _ in range(20):
        rm, _, _ = reflected_instance(rng)
        q = rng.uniform(-5, 5, size=rm.prior.shape)
        mu = kl_improve(rm, q)
        lhs = soft_state_value(rm, mu, q)
        np.testing.assert_allclose(lhs, log_sum_exp_base(rm.prior, q, rm.alpha), atol=1e-9)
        assert np.all(mu[:, 0] > 0)
        np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-12)


# soft optimality backup

def test_backup_constant_and_myopic():
    rm, _, _ = reflected_instance(np.random.default_rng(8), n_cases=7)
    q = np.full(rm.prior.shape, 2.5)
    np.testing.assert_allclose(log_sum_exp_base(rm.prior, q, rm.alpha), 2.5, atol=1e-12)
    np.testing.assert_allclose(soft_optimality_backup(rm, q),
                               rm.reward + rm.gamma * 2.5, atol=1e-12)
    rm0, _, _ = reflected_instance(np.random.default_rng(8), n_cases=7, gamma=0.0)
    np.testing.assert_array_equal(soft_optimality_backup(rm0, q), rm0.reward)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_backup_shift(seed, shift):
    rng = np.random.default_rng(seed)
    rm, _, _ = reflected_instance(rng, n_states=6)
    q = rng.normal(size=rm.prior.shape)
    diff = soft_optimality_backup(rm, q + shift) - soft_optimality_backup(rm, q)
    np.testing.assert_allclose(diff, rm.gamma * shift, atol=1e-9)


def test_operators_contract():
    rng = np.random.default_rng(9)
    for _ in range(100):
        rm, _, _ = reflected_instance(rng, n_states=int(rng.integers(3, 10)),
                                      n_cases=int(rng.integers(0, 8)))
        q1 = rng.uniform(-10, 10, size=rm.prior.shape)
        q2 = rng.uniform(-10, 10, size=rm.prior.shape)
        mu = rng.dirichlet(np.ones(rm.n_columns), size=rm.n_states)
        gap = np.max(np.abs(q1 - q2))
        ev = np.max(np.abs(kl_evaluation_backup(rm, mu, q1) - kl_evaluation_backup(rm, mu, q2)))
        opt = np.max(np.abs(soft_optimality_backup(rm, q1) - soft_optimality_backup(rm, q2)))
        assert ev <= rm.gamma * gap + 1e-12
        assert opt <= rm.gamma * gap + 1e-12


def test_log_sum_exp_bi_lipschitz():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        alpha = float(rng.uniform(0.1, 3.0))
        span = float(rng.uniform(0.0, 4.0))
        q = rng.uniform(0, span, size=n)
        q2 = q + rng.uniform(-1, 1, size=n)
        b = rng.dirichlet(np.ones(n))
        b2 = rng.dirichlet(np.ones(n))
        f = lambda bb, qq: float(log_sum_exp_base(bb, qq, alpha))  # noqa: E731
        assert abs(f(b, q) - f(b, q2)) <= np.max(np.abs(q - q2)) + 1e-12
        delta_q = q.max() - q.min()
        assert abs(f(b, q) - f(b2, q)) <= alpha * np.exp(delta_q / alpha) * np.sum(np.abs(b - b2)) + 1e-12


def test_log_sum_exp_is_stable():
    q = np.array([[1e4, 1e4 - 1.0]])
    v = log_sum_exp_base(np.array([[0.5, 0.5]]), q, 1e-3)
    assert np.isfinite(v).all() and v[0] == pytest.approx(1e4 + 1e-3 * np.log(0.5))


# soft policy iteration

def test_single_action_single_case_converges_in_one_step():
    rm = copy_problem(bandit([1.0], gamma=0.5), [(0, 0)])
    q, mu, trace = soft_policy_iteration(rm)
    assert len(trace) == 2
    np.testing.assert_allclose(mu, rm.prior, atol=1e-12)
    np.testing.assert_allclose(q, 2.0, atol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_spi_monotone_bounded_and_optimal(seed):
    rm, _, _ = reflected_instance(np.random.default_rng(100 + seed))
    q, mu, trace = soft_policy_iteration(rm, tol=1e-8)
    for prev, nxt in zip(trace, trace[1:]):
        assert np.min(nxt.v - prev.v) >= -1e-9
        assert nxt.gibbs_gap <= 1e-9
    assert trace[-1].sup_q_change <= 1e-8
    assert trace[-1].v_soft_max <= rm.soft_value_bound() + 1e-9
    assert np.max(np.abs(soft_optimality_backup(rm, q) - q)) <= 1e-7
    np.testing.assert_allclose(q, soft_value_iteration(rm, tol=1e-12), atol=1e-6)
    np.testing.assert_allclose(mu, kl_improve(rm, q))
    assert np.all(mu[:, 0] > 0)


def test_spi_nonconvergence_carries_trace():
    rm, _, _ = reflected_instance(np.random.default_rng(11), gamma=0.99, n_cases=10)
    with pytest.raises(ConvergenceError) as info:
        soft_policy_iteration(rm, tol=1e-14, max_outer=1)
    assert len(info.value.trace) == 2


# composite policy

def test_composite_examples():
    mdp, _ = chain(3)
    rm = copy_problem(mdp, [(0, 0), (0, 1)])
    point = np.zeros((3, 3))
    point[:, 2] = 1.0
    np.testing.assert_array_equal(composite_policy(rm, point), np.tile([0.0, 1.0], (3, 1)))
    half = np.tile([0.0, 0.5, 0.5], (3, 1))
    np.testing.assert_array_equal(composite_policy(rm, half), np.full((3, 2), 0.5))


def test_composite_value_matches_rollouts():
    rng = np.random.default_rng(12)
    rm, _, _ = reflected_instance(rng, n_states=6, n_cases=5, gamma=0.7)
    mu = rng.dirichlet(np.ones(rm.n_columns), size=rm.n_states)
    pi = composite_policy(rm, mu)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    v = policy_value(rm.env, pi)
    returns = batch_returns(rm.env, pi, 2, 90, 100_000, rng)
    se = returns.std(ddof=1) / np.sqrt(len(returns))
    assert abs(returns.mean() - v[2]) <= 3 * se


def test_composite_of_spi_beats_nothing_on_chain(chain5):
    mdp, env, sol = chain5
    kernel = LlmKernel("copy_action", sol.pi_star, env.distances)
    mem = EpisodicMemory()
    for s in range(5):
        mem.add(s, 1, 0.0, min(s + 1, 4))
    prior = np.full((5, 6), 1 / 6)
    rm = ReflectedMdp(mdp, mem, kernel, prior, 0.05)
    _, mu, _ = soft_policy_iteration(rm)
    v = policy_value(mdp, composite_policy(rm, mu))
    assert np.all(v >= policy_value(mdp, np.full((5, 2), 0.5)))
    assert np.all(v <= value_iteration(mdp).v_star + 1e-9)


# estimator

def test_estimator():
    rm, _, _ = reflected_instance(np.random.default_rng(13), n_cases=4)
    est = SoftPolicyIteration(tol=1e-9)
    assert est.get_params() == {"tol": 1e-9, "max_outer": 500, "eval_tol": 1e-12}
    with pytest.raises(NotFittedError):
        est.predict([0])
    est.fit(rm)
    q, mu, _ = soft_policy_iteration(rm, tol=1e-9)
    np.testing.assert_array_equal(est.mu_, mu)
    np.testing.assert_array_equal(est.predict_proba([0, 1]), mu[[0, 1]])
    assert est.predict([0])[0] == rm.case_ids[int(np.argmax(mu[0]))]
    np.testing.assert_allclose(est.composite_.sum(axis=1), 1.0, atol=1e-12)
