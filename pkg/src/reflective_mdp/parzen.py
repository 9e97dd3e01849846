"""Gaussian Parzen-window base measure over memory cases plus the void case.

Column 0 of every prior array is the void case; columns ``1..N`` follow the
order of ``memory.cases``.
"""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .exceptions import ValidationError
from .memory import VOID_ID

UNDERFLOW = 1e-300
BANDWIDTH_MODES = ("fixed", "silverman", "adaptive")


class EmptyMemoryError(LookupError):
    """No stored case carries positive kernel mass for the query."""


@dataclass(frozen=True)
class Embedding:
    """State embedding ``psi``: row ``s`` of ``coords`` is ``psi(s)``."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or not np.all(np.isfinite(c)):
            raise ValidationError("embedding coords must be a finite (n_states, d) array")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def dim(self):
        return self.coords.shape[1]

    def __call__(self, s):
        return self.coords[s]

    def distances(self):
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(frozen=True)
class ParzenConfig:
    bandwidth_mode: str = "fixed"
    h: float = 1.0
    scale: float = 1.0
    decay: float = 0.0
    void_score: float = 1.0
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValidationError(f"only the gaussian kernel is supported, got {self.kernel!r}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ValidationError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        check_positive(self.h, "h")
        check_positive(self.scale, "scale")
        check_positive(self.void_score, "void_score")
        if self.decay < 0:
            raise ValidationError("decay must be >= 0")

    def to_dict(self):
        return asdict(self)


def bandwidth(mem_size, dim, cfg, t=0):
    """Kernel bandwidth for the given memory size and step.

    ``fixed`` returns ``h``; ``silverman`` returns ``scale * n**(-1/(d+4))``
    with ``n = max(mem_size, 1)``; ``adaptive`` shrinks ``h`` as
    ``h / (1 + t)**decay``.
    """
    if mem_size < 0:
        raise ValidationError("mem_size must be >= 0")
    if cfg.bandwidth_mode == "fixed":
        return cfg.h
    if cfg.bandwidth_mode == "silverman":
        return cfg.scale * max(mem_size, 1) ** (-1.0 / (dim + 4))
    return cfg.h / (1.0 + max(t, 0)) ** cfg.decay


def gaussian_scores(query, centres, h, weights=None):
    """Kernel scores ``w_c * exp(-||(q - c) / h||^2 / 2)``, tiny values zeroed."""
    query = np.atleast_2d(query)
    sq = np.sum((query[:, None, :] - centres[None, :, :]) ** 2, axis=-1) / h**2
    k = np.exp(-0.5 * sq)
    k[k < UNDERFLOW] = 0.0
    if weights is not None:
        k = k * weights
    return k


def normalise_with_void(scores, void_score):
    """Joint normalisation of case scores and the void score (void first)."""
    scores = np.atleast_2d(scores)
    z = scores.sum(axis=1, keepdims=True) + void_score
    return np.hstack([np.full_like(z, void_score), scores]) / z


class ParzenPrior(BaseEstimator):
    """Parzen-window retrieval prior fitted on the embedded case states.

    Parameters
    ----------
    bandwidth_mode : {"fixed", "silverman", "adaptive"}
    h : float
        Bandwidth for ``fixed``; starting bandwidth for ``adaptive``.
    scale : float
        Multiplier in Silverman's rule.
    decay : float
        Exponent of the adaptive schedule.
    void_score : float
        Constant kernel score of the void case; must be positive.

    Attributes
    ----------
    bandwidth_ : float
    centres_ : ndarray of shape (n_cases, d)
    weights_ : ndarray of shape (n_cases,)
    """

    def __init__(self, bandwidth_mode="fixed", h=1.0, scale=1.0, decay=0.0, void_score=1.0):
        self.bandwidth_mode = bandwidth_mode
        self.h = h
        self.scale = scale
        self.decay = decay
        self.void_score = void_score

    def _config(self):
        return ParzenConfig(self.bandwidth_mode, self.h, self.scale, self.decay, self.void_score)

    def fit(self, X, sample_weight=None, t=0):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValidationError("X must be a 2-D array of embedded case states")
        if sample_weight is None:
            sample_weight = np.ones(len(X))
        sample_weight = np.asarray(sample_weight, dtype=float)
        if sample_weight.shape != (len(X),) or np.any(sample_weight < 0):
            raise ValidationError("sample_weight must be non-negative with one entry per case")
        self.bandwidth_ = bandwidth(len(X), X.shape[1], self._config(), t)
        self.centres_ = X
        self.weights_ = sample_weight
        return self

    def scores(self, X):
        check_is_fitted(self, "centres_")
        return gaussian_scores(np.asarray(X, dtype=float), self.centres_, self.bandwidth_,
                               self.weights_)

    def transform(self, X):
        """Prior rows over ``[void, case_1, ..., case_N]`` for each query."""
        return normalise_with_void(self.scores(X), self.void_score)

    def memory_weights(self, X):
        """Void-free normalised weights; raises if a row has no kernel mass."""
        k = self.scores(X)
        z = k.sum(axis=1, keepdims=True)
        if k.shape[1] == 0 or np.any(z <= 0):
            raise EmptyMemoryError("no stored case has positive kernel mass")
        return k / z


def _fitted(mem, emb, cfg, t):
    est = ParzenPrior(cfg.bandwidth_mode, cfg.h, cfg.scale, cfg.decay, cfg.void_score)
    centres = emb.coords[mem.states] if len(mem) else np.empty((0, emb.dim))
    return est.fit(centres, mem.weights if len(mem) else None, t=t)


def parzen_weights(s, mem, emb, cfg, t=0):
    """Normalised similarity of ``s`` to each stored case (void excluded)."""
    if len(mem) == 0:
        raise EmptyMemoryError("memory holds no cases")
    return _fitted(mem, emb, cfg, t).memory_weights(emb(s)[None, :])[0]


def build_prior(s, mem, emb, cfg, t=0):
    """Base measure over ``[void] + memory.cases`` at state ``s``."""
    return _fitted(mem, emb, cfg, t).transform(emb(s)[None, :])[0]


def prior_matrix(mem, emb, cfg, t=0):
    """Prior rows for every environment state, shape ``(n_states, len(mem) + 1)``."""
    return _fitted(mem, emb, cfg, t).transform(emb.coords)


def mixture_prior(s, mem, emb, cfg, t=0):
    """Same measure as :func:`build_prior`, assembled as a void/memory mixture."""
    est = _fitted(mem, emb, cfg, t)
    k = est.scores(emb(s)[None, :])[0]
    total = k.sum()
    lam = total / (total + cfg.void_score)
    mem_part = k / total if total > 0 else np.zeros_like(k)
    return np.concatenate([[1.0 - lam], lam * mem_part])


def prior_mapping(emb, cfg, t=0):
    """Adapter for :func:`memory.memory_distance`: ``(mem, x) -> {id: mass}``."""
    def build(mem, x):
        row = build_prior(x, mem, emb, cfg, t)
        return dict(zip([VOID_ID, *mem.ids.tolist()], row.tolist()))

    return build
