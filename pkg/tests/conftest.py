import numpy as np
import pytest

from reflective_mdp.environments import chain, random_mdp
from reflective_mdp.llm_kernel import LinearModulus, LlmKernel
from reflective_mdp.mdp import value_iteration
from reflective_mdp.memory import EpisodicMemory
from reflective_mdp.parzen import ParzenConfig, prior_matrix
from reflective_mdp.reflected import ReflectedMdp

# criterion number -> (label, passed); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def random_memory(n_states, n_cases, rng, void_score=1.0):
    mem = EpisodicMemory(void_score=void_score)
    for _ in range(n_cases):
        mem.add(int(rng.integers(n_states)), 0, 0.0, 0)
    return mem


def reflected_instance(rng, n_states=None, n_cases=None, gamma=None, alpha=None, h=0.3,
                       slope=None, n_actions=3):
    """Random environment + locally consistent kernel + random memory."""
    n_states = int(rng.integers(5, 21)) if n_states is None else n_states
    n_cases = int(rng.integers(0, 31)) if n_cases is None else n_cases
    gamma = float(rng.choice([0.5, 0.9, 0.99])) if gamma is None else gamma
    alpha = float(rng.uniform(0.2, 2.0)) if alpha is None else alpha
    slope = float(rng.uniform(0.5, 3.0)) if slope is None else slope
    mdp, env = random_mdp(n_states, n_actions, 0.5, int(rng.integers(2**31)), gamma)
    sol = value_iteration(mdp)
    kernel = LlmKernel("locally_consistent", sol.pi_star, env.distances, LinearModulus(slope))
    mem = random_memory(n_states, n_cases, rng)
    prior = prior_matrix(mem, env.embedding, ParzenConfig(h=h))
    return ReflectedMdp(mdp, mem, kernel, prior, alpha), sol, env


def batch_returns(mdp, policy, s0, horizon, n_episodes, rng):
    """Discounted returns of ``n_episodes`` truncated rollouts, simulated in lockstep."""
    policy = np.asarray(policy, dtype=float)
    pi_cdf = np.cumsum(policy, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = np.full(n_episodes, s0)
    total, disc = np.zeros(n_episodes), 1.0
    for _ in range(horizon):
        a = np.minimum((rng.random(n_episodes)[:, None] > pi_cdf[s]).sum(axis=1),
                       mdp.n_actions - 1)
        total += disc * mdp.reward[s, a]
        s = np.minimum((rng.random(n_episodes)[:, None] > p_cdf[s, a]).sum(axis=1),
                       mdp.n_states - 1)
        disc *= mdp.gamma
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def chain5():
    mdp, env = chain(5, gamma=0.9)
    return mdp, env, value_iteration(mdp)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        label, ok = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {label}")
