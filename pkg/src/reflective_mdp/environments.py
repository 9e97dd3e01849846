"""Desk-scale environments with an embedding and the metric it induces."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_random_state
from .exceptions import ValidationError
from .mdp import TabularMdp, load_mdp
from .parzen import Embedding

LEFT, RIGHT = 0, 1
GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left as (drow, dcol)


@dataclass(frozen=True)
class Environment:
    kind: str
    embedding: Embedding

    @property
    def distances(self):
        return self.embedding.distances()


def chain(n, gamma=0.9):
    """``n`` states in a line; left/right moves clamp at the ends; reward 1 at the right end."""
    if n < 1:
        raise ValidationError("chain length n must be >= 1")
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, LEFT, max(s - 1, 0)] = 1.0
        P[s, RIGHT, min(s + 1, n - 1)] = 1.0
    R = np.zeros((n, 2))
    R[n - 1, :] = 1.0
    coords = np.arange(n) / max(n - 1, 1)
    return TabularMdp(P, R, gamma), Environment("chain", Embedding(coords))


def gridworld(width, height, goal=None, step_reward=0.0, goal_reward=1.0, gamma=0.9):
    """4-connected deterministic grid; entering the goal pays ``goal_reward``, goal absorbs.

    State ``s = row * width + col``; ``psi(s) = (col, row) / max(width - 1, height - 1)``.
    """
    if width < 1 or height < 1:
        raise ValidationError("gridworld width and height must be >= 1")
    n = width * height
    goal = (height - 1, width - 1) if goal is None else tuple(goal)
    if not (0 <= goal[0] < height and 0 <= goal[1] < width):
        raise ValidationError(f"goal {goal} lies outside the grid")
    g = goal[0] * width + goal[1]
    P = np.zeros((n, 4, n))
    R = np.full((n, 4), float(step_reward))
    for s in range(n):
        row, col = divmod(s, width)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            if s == g:
                P[s, a, s] = 1.0
                R[s, a] = 0.0
                continue
            r2 = min(max(row + dr, 0), height - 1)
            c2 = min(max(col + dc, 0), width - 1)
            s2 = r2 * width + c2
            P[s, a, s2] = 1.0
            if s2 == g:
                R[s, a] = goal_reward
    rows, cols = np.divmod(np.arange(n), width)
    coords = np.stack([cols, rows], axis=1) / max(width - 1, height - 1, 1)
    return TabularMdp(P, R, gamma), Environment("gridworld", Embedding(coords))


def random_mdp(n_states, n_actions, sparsity=0.5, seed=0, gamma=0.9):
    """Random rows with a random support, gamma-distributed weights; rewards in ``[0, 1]``."""
    if n_states < 1 or n_actions < 1:
        raise ValidationError("random_mdp needs n_states >= 1 and n_actions >= 1")
    if not 0.0 <= sparsity < 1.0:
        raise ValidationError("sparsity must lie in [0, 1)")
    rng = check_random_state(seed)
    w = rng.gamma(1.0, size=(n_states, n_actions, n_states))
    keep = rng.random(w.shape) >= sparsity
    keep[np.arange(n_states)[:, None], np.arange(n_actions)[None, :],
         rng.integers(n_states, size=(n_states, n_actions))] = True
    w = np.where(keep, w, 0.0)
    P = w / w.sum(axis=2, keepdims=True)
    R = rng.random((n_states, n_actions))
    coords = np.arange(n_states) / max(n_states - 1, 1)
    return TabularMdp(P, R, gamma), Environment("random_mdp", Embedding(coords))


def build_environment(spec, base_dir=None):
    """Build ``(TabularMdp, Environment)`` from a JSON-style spec dict."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    builders = {
        "chain": (chain, {"n", "gamma"}),
        "gridworld": (gridworld, {"width", "height", "goal", "step_reward", "goal_reward", "gamma"}),
        "random_mdp": (random_mdp, {"n_states", "n_actions", "sparsity", "seed", "gamma"}),
    }
    if kind == "file":
        unknown = set(spec) - {"path", "coords"}
        if unknown or "path" not in spec:
            raise ValidationError(f"env.{(sorted(unknown) or ['path'])[0]}: file env takes path[, coords]")
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        mdp = load_mdp(path)
        coords = spec.get("coords", np.arange(mdp.n_states) / max(mdp.n_states - 1, 1))
        return mdp, Environment("file", Embedding(coords))
    if kind not in builders:
        raise ValidationError(f"env.kind: unknown environment kind {kind!r}")
    fn, allowed = builders[kind]
    unknown = set(spec) - allowed
    if unknown:
        raise ValidationError(f"env.{sorted(unknown)[0]}: unknown key for {kind}")
    try:
        return fn(**spec)
    except TypeError as exc:
        raise ValidationError(f"env: {exc}") from None
