"""Experiment configuration: one JSON document, validated before any run."""

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .learning import StepSchedule, TARGET_MODES
from .llm_kernel import KINDS
from .memory import SCHEMES
from .parzen import ParzenConfig

MEMORY_KINDS = ("empty", "evenly_spaced", "random", "file")
RETRIEVAL_RULES = ("deterministic", "soft")


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ValidationError(f"{where}.{unknown[0]}: unknown key")


@dataclass
class KernelSpec:
    kind: str = "locally_consistent"
    epsilon_slope: float = 1.0
    r_void: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kernel.kind: expected one of {KINDS}")
        if self.epsilon_slope < 0:
            raise ValidationError("kernel.epsilon_slope: must be >= 0")


@dataclass
class MemorySpec:
    """Initial memory: empty, ``n_cases`` evenly spaced or random states, or a snapshot."""

    kind: str = "empty"
    n_cases: int = 0
    path: str = None

    def __post_init__(self):
        if self.kind not in MEMORY_KINDS:
            raise ValidationError(f"memory.kind: expected one of {MEMORY_KINDS}")
        if self.n_cases < 0:
            raise ValidationError("memory.n_cases: must be >= 0")
        if self.kind == "file" and not self.path:
            raise ValidationError("memory.path: required for a file memory")


@dataclass
class WriteSpec:
    scheme: str = "replay"
    capacity: int = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"write_policy.scheme: expected one of {SCHEMES}")
        if self.scheme == "sliding_window" and not self.capacity:
            raise ValidationError("write_policy.capacity: required for sliding_window")


def _schedule(doc, where):
    if doc is None:
        return None
    _check_keys(doc, ("base", "offset", "exponent"), where)
    try:
        return StepSchedule(**doc)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


@dataclass
class ExperimentConfig:
    """Everything a CLI run needs.

    ``rho = None`` freezes the memory during ``learn``.
    """

    env: dict
    kernel: KernelSpec = field(default_factory=KernelSpec)
    parzen: ParzenConfig = field(default_factory=ParzenConfig)
    alpha: float = 1.0
    eta: StepSchedule = field(default_factory=lambda: StepSchedule(1.0, 1.0, 0.7))
    rho: StepSchedule = field(default_factory=lambda: StepSchedule(0.3, 1.0, 0.95))
    write_policy: WriteSpec = field(default_factory=WriteSpec)
    memory: MemorySpec = field(default_factory=MemorySpec)
    target_mode: str = "lse"
    horizon: int = 10_000
    restart_prob: float = 0.2
    oracle_every: int = 500
    retrieval: str = "deterministic"
    coverage_levels: list = field(default_factory=lambda: [1, 3, 5, 9])
    tol: float = 1e-8
    max_outer: int = 500
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha: must be > 0")
        if self.target_mode not in TARGET_MODES:
            raise ValidationError(f"target_mode: expected one of {TARGET_MODES}")
        if self.retrieval not in RETRIEVAL_RULES:
            raise ValidationError(f"retrieval: expected one of {RETRIEVAL_RULES}")
        if self.horizon < 0 or self.oracle_every < 0:
            raise ValidationError("horizon and oracle_every must be >= 0")
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ValidationError("restart_prob: must lie in [0, 1]")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed: must be a non-negative integer")
        if "kind" not in self.env:
            raise ValidationError("env.kind: required")

    @classmethod
    def from_dict(cls, doc):
        doc = copy.deepcopy(doc)
        _check_keys(doc, [f.name for f in fields(cls)], "config")
        if "env" not in doc:
            raise ValidationError("config.env: required")
        nested = {"kernel": KernelSpec, "parzen": ParzenConfig, "write_policy": WriteSpec,
                  "memory": MemorySpec}
        for key, kind in nested.items():
            if key in doc:
                _check_keys(doc[key], [f.name for f in fields(kind)], key)
                try:
                    doc[key] = kind(**doc[key])
                except ValidationError as exc:
                    msg = str(exc)
                    raise ValidationError(msg if msg.startswith(key) else f"{key}: {msg}") from None
        for key in ("eta", "rho"):
            if key in doc:
                doc[key] = _schedule(doc[key], key)
        if doc.get("eta", 1) is None:
            raise ValidationError("eta: required")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(f"config: {exc}") from None

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else copy.deepcopy(v)
        return out

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def named_stream(seed, name):
    """Independent generator for the sub-stream ``name`` of a top-level seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
