"""Episodic case memory: storage, write schemes, coverage and distances."""

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

VOID_ID = -1
SCHEMES = ("replay", "sliding_window", "importance_weighted")


@dataclass
class Case:
    """One stored transition ``(s, a, r, s')`` plus its attached value."""

    id: int
    s: int
    a: int
    r: float
    s_next: int
    q_estimate: float = 0.0
    weight: float = 1.0


class IdAllocator:
    """Hands out case ids; shared by every memory derived from the same root."""

    def __init__(self, start=0):
        self._counter = itertools.count(start)

    def __call__(self):
        return next(self._counter)


class EpisodicMemory:
    """Ordered multiset of cases plus the always-available void case.

    Cases are identified by ``id`` only, so duplicate transitions are kept as
    distinct cases. The void case (``VOID_ID``) is not stored in ``cases``
    and never counts towards ``len(memory)``.
    """

    void_id = VOID_ID

    def __init__(self, cases=(), void_score=1.0, capacity=None, allocator=None):
        if void_score <= 0:
            raise ValidationError("void_score must be > 0")
        if capacity is not None and capacity < 1:
            raise ValidationError("capacity must be a positive integer")
        self.cases = list(cases)
        self.void_score = float(void_score)
        self.capacity = capacity
        if allocator is None:
            start = max((c.id for c in self.cases), default=-1) + 1
            allocator = IdAllocator(start)
        self._allocator = allocator

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __repr__(self):
        return f"EpisodicMemory(size={len(self)}, capacity={self.capacity})"

    @property
    def ids(self):
        return np.array([c.id for c in self.cases], dtype=int)

    @property
    def states(self):
        return np.array([c.s for c in self.cases], dtype=int)

    @property
    def weights(self):
        return np.array([c.weight for c in self.cases], dtype=float)

    def get(self, case_id):
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def add(self, s, a, r, s_next, q_estimate=0.0, weight=1.0):
        case = Case(self._allocator(), int(s), int(a), float(r), int(s_next),
                    float(q_estimate), float(weight))
        self.cases.append(case)
        return case

    def evict_oldest(self):
        return self.cases.pop(0)

    def copy(self):
        """Value copy of the cases; the id allocator stays shared."""
        return EpisodicMemory([Case(**asdict(c)) for c in self.cases], self.void_score,
                              self.capacity, self._allocator)

    def to_dict(self):
        return {"void_score": self.void_score, "cases": [asdict(c) for c in self.cases]}

    @classmethod
    def from_dict(cls, doc, capacity=None):
        cases = [Case(int(c["id"]), int(c["s"]), int(c["a"]), float(c["r"]), int(c["s_next"]),
                      float(c["q_estimate"]), float(c["weight"])) for c in doc["cases"]]
        if len({c.id for c in cases}) != len(cases):
            raise ValidationError("snapshot contains duplicate case ids")
        return cls(cases, doc["void_score"], capacity)


def save_memory(mem, path):
    Path(path).write_text(json.dumps(mem.to_dict(), indent=1) + "\n")


def load_memory(path, capacity=None):
    with open(path) as fh:
        return EpisodicMemory.from_dict(json.load(fh), capacity)


@dataclass
class WritePolicy:
    """How and when new transitions enter memory.

    ``rho_schedule`` maps the step ``t`` to the write probability; a float is
    treated as a constant schedule.
    """

    scheme: str = "replay"
    rho_schedule: object = 1.0
    capacity: int = None
    k_neighbours: int = field(default=3)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown write scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme == "sliding_window" and not self.capacity:
            raise ValidationError("sliding_window needs a positive capacity")

    def rho(self, t):
        rho = self.rho_schedule(t) if callable(self.rho_schedule) else float(self.rho_schedule)
        if not 0.0 <= rho <= 1.0:
            logger.warning("write probability %r at t=%d clamped to [0, 1]", rho, t)
            rho = min(max(rho, 0.0), 1.0)
        return rho


def smoothed_q_estimate(mem, s, distances, kernel=None, k=3):
    """Kernel-weighted mean ``q_estimate`` of the ``k`` cases nearest to ``s``.

    ``distances`` is the state-distance matrix; ``kernel`` maps a distance to
    a non-negative similarity (plain mean when omitted or all-zero). An empty
    memory gives 0.
    """
    if not mem.cases:
        return 0.0
    d = np.array([distances[s, c.s] for c in mem.cases])
    order = np.lexsort((mem.ids, d))[:k]
    q = np.array([mem.cases[i].q_estimate for i in order])
    w = np.ones(len(order)) if kernel is None else np.array([kernel(d[i]) for i in order])
    if w.sum() <= 0:
        w = np.ones(len(order))
    return float(np.dot(w, q) / w.sum())


def apply_write(mem, policy, t, transition, rng, weight=1.0, q_estimate=0.0):
    """Perform one stochastic write in place; returns ``(added, evicted)``."""
    s, a, r, s_next = transition
    if rng.random() >= policy.rho(t):
        return None, None
    evicted = None
    if policy.scheme == "sliding_window" and len(mem) >= policy.capacity:
        evicted = mem.evict_oldest()
    w = weight if policy.scheme == "importance_weighted" else 1.0
    return mem.add(s, a, r, s_next, q_estimate, w), evicted


def write(mem, policy, t, transition, rng, weight=1.0, distances=None, kernel=None):
    """Stochastic memory write; mutates and returns ``mem``.

    With probability ``rho_t`` the transition ``(s, a, r, s')`` is stored:
    appended (replay), appended after evicting the oldest case once the
    window is full (sliding_window), or appended with ``weight``
    (importance_weighted). The new case's ``q_estimate`` is smoothed from its
    nearest neighbours when a distance matrix is supplied.
    """
    q0 = 0.0
    if distances is not None:
        q0 = smoothed_q_estimate(mem, transition[0], distances, kernel, policy.k_neighbours)
    apply_write(mem, policy, t, transition, rng, weight, q0)
    return mem


def coverage_radius(mem, distances, states=None):
    """Per-state distance to the nearest stored case and its supremum.

    The void case is excluded. An empty memory gives ``inf`` everywhere.
    """
    distances = np.asarray(distances, dtype=float)
    states = np.arange(distances.shape[0]) if states is None else np.asarray(states, dtype=int)
    if not mem.cases:
        radii = np.full(len(states), math.inf)
    else:
        radii = distances[np.ix_(states, mem.states)].min(axis=1)
    return radii, float(radii.max()) if len(radii) else math.inf


def memory_distance(m1, m2, prior_builder, probe_states):
    """Largest total-variation gap between the base measures two memories induce.

    ``prior_builder(mem, x)`` returns a mapping ``case_id -> probability`` for
    probe state ``x``; ids absent from a mapping carry zero mass.
    """
    worst = 0.0
    for x in probe_states:
        p, q = prior_builder(m1, x), prior_builder(m2, x)
        tv = 0.5 * sum(abs(p.get(c, 0.0) - q.get(c, 0.0)) for c in set(p) | set(q))
        worst = max(worst, tv)
    return worst
