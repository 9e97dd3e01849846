"""``reflective-mdp solve|learn|bounds|sweep --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 certificate violation,
4 numerical non-convergence.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .bounds import (
    SWEEP_COLUMNS,
    coverage_sweep,
    evenly_spaced_states,
    memory_at_states,
    verify_value_bound,
)
from .config import load_config, named_stream
from .environments import build_environment
from .exceptions import CertificateViolation, ConvergenceError, ValidationError
from .learning import LearnerSetup, ZeroSchedule, learn
from .llm_kernel import LinearModulus, LlmKernel
from .mdp import value_iteration
from .memory import EpisodicMemory, WritePolicy, load_memory
from .parzen import prior_matrix
from .reflected import ReflectedMdp, SoftPolicyIteration, soft_value_iteration

logger = logging.getLogger("reflective_mdp")

EXIT_OK, EXIT_CONFIG, EXIT_CERTIFICATE, EXIT_CONVERGENCE = 0, 2, 3, 4
OUT_ENV_VAR = "REFLECTIVE_MDP_OUT"
CERT_TOL = 1e-9
AGREEMENT_TOL = 1e-6


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def json_bytes(doc):
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


class Outputs:
    """Collects output files so the manifest can hash exactly what was written."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hashes = {}

    def write(self, name, data):
        (self.dir / name).write_bytes(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scikit-learn": metadata.version("scikit-learn"), "reflective_mdp": own}


def build_problem(cfg, base_dir):
    """Environment, its exact solution, the action kernel and the initial memory."""
    env_spec = dict(cfg.env)
    if env_spec.get("kind") == "random_mdp" and "seed" not in env_spec:
        env_spec["seed"] = int(named_stream(cfg.seed, "env").integers(2**31))
    mdp, environment = build_environment(env_spec, base_dir)
    oracle = value_iteration(mdp)
    k = cfg.kernel
    kernel = LlmKernel(k.kind, oracle.pi_star, environment.distances,
                       LinearModulus(k.epsilon_slope), k.r_void)
    mem = initial_memory(cfg, mdp, oracle, base_dir)
    return mdp, environment, oracle, kernel, mem


def initial_memory(cfg, mdp, oracle, base_dir):
    spec, void = cfg.memory, cfg.parzen.void_score
    if spec.kind == "empty":
        return EpisodicMemory(void_score=void)
    if spec.kind == "evenly_spaced":
        return memory_at_states(mdp, evenly_spaced_states(mdp.n_states, spec.n_cases), oracle, void)
    if spec.kind == "file":
        path = Path(spec.path)
        if not path.is_absolute():
            path = Path(base_dir) / path
        try:
            mem = load_memory(path)
        except (OSError, KeyError, ValueError) as exc:
            raise ValidationError(f"memory.path: cannot load snapshot ({exc})") from None
        if np.any(mem.states >= mdp.n_states):
            raise ValidationError("memory.path: snapshot refers to states outside the environment")
        return mem
    rng = named_stream(cfg.seed, "memory")
    mem = EpisodicMemory(void_score=void)
    for _ in range(spec.n_cases):
        s = int(rng.integers(mdp.n_states))
        a = int(rng.integers(mdp.n_actions))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        mem.add(s, a, float(mdp.reward[s, a]), s2)
    return mem


def _reflected(cfg, mdp, environment, kernel, mem):
    return ReflectedMdp(mdp, mem, kernel, prior_matrix(mem, environment.embedding, cfg.parzen),
                        cfg.alpha)


def cmd_solve(cfg, base_dir, out):
    mdp, environment, oracle, kernel, mem = build_problem(cfg, base_dir)
    rm = _reflected(cfg, mdp, environment, kernel, mem)
    est = SoftPolicyIteration(tol=cfg.tol, max_outer=cfg.max_outer).fit(rm)
    out.write("trace.csv", csv_bytes(
        ("outer_iter", "sup_q_change", "min_monotonicity_slack", "v_soft_max", "gibbs_gap",
         "eval_iters"),
        [(s.outer_iter, s.sup_q_change, s.min_monotonicity_slack, s.v_soft_max, s.gibbs_gap,
          s.eval_iters) for s in est.trace_]))
    q_direct = soft_value_iteration(rm)
    agreement = float(np.max(np.abs(q_direct - est.q_)))
    v_max = max(s.v_soft_max for s in est.trace_)
    checks = {
        "monotonicity": min(s.min_monotonicity_slack for s in est.trace_[1:]) if est.n_iter_ else 0.0,
        "gibbs": -max(s.gibbs_gap for s in est.trace_),
        "soft_value_bound": rm.soft_value_bound() - v_max,
        "fixed_point_agreement": AGREEMENT_TOL - agreement,
    }
    out.write("solution.json", json_bytes({
        "case_ids": est.case_ids_, "q": est.q_.tolist(), "mu": est.mu_.tolist(),
        "n_outer": est.n_iter_, "fixed_point_agreement": agreement,
        "v_star": oracle.v_star.tolist(), "checks": checks}))
    out.write("memory.json", json_bytes(mem.to_dict()))
    failed = [k for k, slack in checks.items() if slack < -CERT_TOL]
    if failed:
        raise CertificateViolation(f"certificate violated: {', '.join(failed)}")


def cmd_learn(cfg, base_dir, out):
    mdp, environment, oracle, kernel, mem = build_problem(cfg, base_dir)
    setup = LearnerSetup(mdp, environment.distances, environment.embedding, kernel, cfg.parzen,
                         cfg.alpha, cfg.target_mode)
    rho = ZeroSchedule() if cfg.rho is None else cfg.rho
    policy = WritePolicy(cfg.write_policy.scheme, rho, cfg.write_policy.capacity)
    seed = int(named_stream(cfg.seed, "learner").integers(2**63))
    state, diag = learn(setup, cfg.eta, policy, cfg.horizon, seed, mem, cfg.restart_prob,
                        cfg.oracle_every, oracle.v_star)
    out.write("diagnostics.csv", csv_bytes(
        ("t", "td_error", "tracking_error", "memory_size", "value_gap"), diag.rows()))
    out.write("memory.json", json_bytes(state.mem.to_dict()))


def cmd_bounds(cfg, base_dir, out):
    mdp, environment, oracle, kernel, mem = build_problem(cfg, base_dir)
    rm = _reflected(cfg, mdp, environment, kernel, mem)
    mu = None
    if cfg.retrieval == "soft":
        mu = SoftPolicyIteration(tol=cfg.tol, max_outer=cfg.max_outer).fit(rm).mu_
    rep = verify_value_bound(rm, oracle, mu=mu, strict=False)
    row = rep.row()
    out.write("bounds.csv", csv_bytes(tuple(row), [tuple(row.values())]))
    per = rep.per_state
    out.write("bounds_per_state.csv", csv_bytes(
        ("state", "radius", "delta", "tv", "epsilon", "gap"),
        [(s, per["radius"][s], per["delta"][s], per["tv"][s], per["epsilon"][s], per["gap"][s])
         for s in range(mdp.n_states)]))
    out.write("memory.json", json_bytes(mem.to_dict()))
    _raise_on_violation(rep)


def _raise_on_violation(rep):
    slacks = {"value gap": rep.slack, "coverage": rep.coverage_slack, "reward": rep.reward_slack}
    failed = [k for k, v in slacks.items() if not math.isnan(v) and v < -CERT_TOL]
    if failed:
        raise CertificateViolation(f"certificate violated: {', '.join(failed)}", rep)


def cmd_sweep(cfg, base_dir, out):
    mdp, environment, oracle, kernel, _ = build_problem(cfg, base_dir)
    rows = coverage_sweep(mdp, environment, kernel, cfg.coverage_levels, oracle, cfg.alpha,
                          cfg.parzen, strict=False)
    out.write("sweep.csv", csv_bytes(SWEEP_COLUMNS,
                                     [tuple(getattr(r, c) for c in SWEEP_COLUMNS) for r in rows]))
    bad = [r.level for r in rows if r.slack < -CERT_TOL]
    if bad:
        raise CertificateViolation(f"value-gap bound violated at levels {bad}")


COMMANDS = {"solve": cmd_solve, "learn": cmd_learn, "bounds": cmd_bounds, "sweep": cmd_sweep}


def build_parser():
    p = argparse.ArgumentParser(prog="reflective-mdp",
                                description="Retrieval-augmented control experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory")
    return p


def run(command, cfg, base_dir, out_dir):
    """Execute one subcommand; returns the exit code. The manifest is always written."""
    out = Outputs(out_dir)
    status, code, message = "ok", EXIT_OK, ""
    try:
        COMMANDS[command](cfg, base_dir, out)
    except CertificateViolation as exc:
        status, code, message = "certificate_violation", EXIT_CERTIFICATE, str(exc)
    except ConvergenceError as exc:
        status, code, message = "non_convergence", EXIT_CONVERGENCE, str(exc)
    except ValidationError as exc:
        status, code, message = "config_error", EXIT_CONFIG, str(exc)
    manifest = {
        "command": command, "config_sha256": cfg.digest(), "seed": cfg.seed,
        "versions": _versions(), "outputs": dict(sorted(out.hashes.items())),
        "status": status, "exit_code": code, "message": message,
    }
    (out.dir / "manifest.json").write_bytes(json_bytes(manifest))
    if message:
        logger.error("%s: %s", status, message)
    return code


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ValidationError as exc:
        logger.error("config_error: %s", exc)
        return EXIT_CONFIG
    out_dir = args.out or os.environ.get(OUT_ENV_VAR) or cfg.output_dir
    return run(args.command, cfg, Path(args.config).resolve().parent, out_dir)


if __name__ == "__main__":
    sys.exit(main())
