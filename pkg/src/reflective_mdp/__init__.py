"""Tabular retrieval-augmented control with a Parzen-KL retrieval prior.

A frozen episodic memory turns retrieval into an ordinary control problem
whose actions are stored cases (plus a void case); :mod:`reflected` solves it
by KL-regularised soft policy iteration, :mod:`learning` runs the online
read-write loop, and :mod:`bounds` certifies how close the induced policy is
to the environment's optimum.
"""

from .bounds import (
    BoundReport,
    LipschitzEstimate,
    coverage_sweep,
    deterministic_composite,
    fixed_point_lipschitz_probe,
    measure_delta_M,
    tv_distance,
    verify_value_bound,
)
from .config import ExperimentConfig, load_config
from .environments import Environment, build_environment, chain, gridworld, random_mdp
from .exceptions import CertificateViolation, ConvergenceError, ValidationError
from .learning import ReadWriteLearner, StepSchedule, learn
from .llm_kernel import LinearModulus, LlmKernel
from .mdp import ExactSolution, TabularMdp, policy_value, value_iteration
from .memory import VOID_ID, Case, EpisodicMemory, WritePolicy
from .parzen import Embedding, ParzenConfig, ParzenPrior
from .reflected import ReflectedMdp, SoftPolicyIteration, soft_policy_iteration

__all__ = [
    "BoundReport", "Case", "CertificateViolation", "ConvergenceError", "Embedding",
    "Environment", "EpisodicMemory", "ExactSolution", "ExperimentConfig", "LinearModulus",
    "LipschitzEstimate", "LlmKernel", "ParzenConfig", "ParzenPrior", "ReadWriteLearner",
    "ReflectedMdp", "SoftPolicyIteration", "StepSchedule", "TabularMdp", "VOID_ID",
    "ValidationError", "WritePolicy", "build_environment", "chain", "coverage_sweep",
    "deterministic_composite", "fixed_point_lipschitz_probe", "gridworld", "learn",
    "load_config", "measure_delta_M", "policy_value", "random_mdp", "soft_policy_iteration",
    "tv_distance", "value_iteration", "verify_value_bound",
]
