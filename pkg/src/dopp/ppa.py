"""PPA records, min-max normalization, composite cost, and evaluation backends."""
from __future__ import annotations

import hashlib
import math
import os
import shlex
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .netlist import Netlist, Partition
from .proxy import feature_vector

__all__ = [
    "MetricSpec",
    "MetricSchema",
    "DEFAULT_METRICS",
    "PREFERENCES",
    "PpaRecord",
    "normalize_metrics",
    "composite_cost",
    "composite_costs",
    "EvalBackend",
    "SyntheticOracle",
    "ExternalCommand",
    "external_evaluate",
    "EvaluationError",
    "EvaluationTimeout",
    "EvaluationCommandError",
    "MetricsFormatError",
    "TIMEOUT_ENV",
]

TIMEOUT_ENV = "DOPP_EVAL_TIMEOUT_S"


@dataclass(frozen=True)
class MetricSpec:
    name: str
    unit: str
    orientation: str = "lower"  # "lower" or "higher" is better
    in_preference: bool = True
    weight: float = 1.0

    def __post_init__(self):
        if self.orientation not in ("lower", "higher"):
            raise ValueError(f"orientation must be 'lower' or 'higher', got {self.orientation!r}")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError("metric weight must be finite and non-negative")


DEFAULT_METRICS = (
    MetricSpec("congestion", "%"),
    MetricSpec("rwl", "m"),
    MetricSpec("wns", "ns", "higher"),
    MetricSpec("tns", "ns", "higher"),
    MetricSpec("power", "W"),
)

PREFERENCES = {
    "timing": ("wns", "tns"),
    "routing": ("congestion", "rwl"),
    "power": ("power",),
    "balanced": tuple(m.name for m in DEFAULT_METRICS),
}


@dataclass(frozen=True)
class MetricSchema:
    metrics: tuple[MetricSpec, ...] = DEFAULT_METRICS

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))
        names = [m.name for m in self.metrics]
        if len(set(names)) != len(names):
            raise ValueError("duplicate metric names")
        if not any(m.in_preference for m in self.metrics):
            raise ValueError("at least one metric must be in the preference")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.metrics)

    @property
    def active(self) -> tuple[MetricSpec, ...]:
        return tuple(m for m in self.metrics if m.in_preference)

    def with_preference(self, preference: str | Mapping[str, float]) -> "MetricSchema":
        """Restrict the schema to a named preset or to per-metric weights.

        Weights scale the normalized metrics before the l2 norm; metrics
        absent from the mapping (or with weight 0) drop out.
        """
        if isinstance(preference, str):
            if preference not in PREFERENCES:
                raise ValueError(f"unknown preference {preference!r}; choose from {sorted(PREFERENCES)}")
            chosen = {n: 1.0 for n in PREFERENCES[preference]}
        else:
            chosen = {k: float(v) for k, v in preference.items()}
        unknown = set(chosen) - set(self.names)
        if unknown:
            raise ValueError(f"preference names unknown metrics {sorted(unknown)}")
        return MetricSchema(
            tuple(replace(m, in_preference=chosen.get(m.name, 0) > 0, weight=chosen.get(m.name, 1.0) or 1.0) for m in self.metrics)
        )

    def to_dict(self) -> list[dict]:
        return [m.__dict__.copy() for m in self.metrics]

    @classmethod
    def from_dict(cls, items) -> "MetricSchema":
        return cls(tuple(MetricSpec(**it) for it in items))


@dataclass(frozen=True)
class PpaRecord:
    candidate_uid: int
    metrics: Mapping[str, float]
    backend: str = "unknown"
    wall_seconds: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "metrics", {k: float(v) for k, v in self.metrics.items()})
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metric(s) {bad} for candidate {self.candidate_uid}")

    def vector(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.metrics]
        if missing:
            raise KeyError(f"candidate {self.candidate_uid} lacks metric(s) {missing}")
        return np.array([self.metrics[n] for n in names], dtype=float)


def _raw_matrix(records: Sequence[PpaRecord], schema: MetricSchema) -> np.ndarray:
    active = schema.active
    raw = np.array([r.vector([m.name for m in active]) for r in records], dtype=float).reshape(len(records), len(active))
    signs = np.array([-1.0 if m.orientation == "higher" else 1.0 for m in active])
    return raw * signs


def normalize_metrics(records: Sequence[PpaRecord], schema: MetricSchema | None = None) -> np.ndarray:
    """Min-max scale each preferred metric over ``records``; rows follow input order.

    Higher-is-better metrics are negated first so that 0 is always the best
    value in the population.  A constant column normalizes to all zeros.
    """
    if not records:
        raise ValueError("cannot normalize an empty record list")
    schema = schema or MetricSchema()
    x = _raw_matrix(records, schema)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.zeros_like(x)
    nz = span > 0
    out[:, nz] = (x[:, nz] - lo[nz]) / span[nz]
    return np.clip(out, 0.0, 1.0)


def composite_cost(row, weights=None) -> float:
    """l2 norm of a normalized metric row, optionally with per-metric weights."""
    row = np.asarray(row, dtype=float)
    if weights is not None:
        row = row * np.asarray(weights, dtype=float)
    return float(np.sqrt(np.sum(row * row)))


def composite_costs(records: Sequence[PpaRecord], schema: MetricSchema | None = None) -> np.ndarray:
    schema = schema or MetricSchema()
    norm = normalize_metrics(records, schema)
    w = np.array([m.weight for m in schema.active])
    return np.sqrt(np.sum((norm * w) ** 2, axis=1))


class EvalBackend(Protocol):
    tag: str

    def evaluate(self, netlist: Netlist, partition: Partition, uid: int) -> PpaRecord: ...


# ---------------------------------------------------------------------------
# synthetic oracle

_MASK64 = (1 << 64) - 1
_SQRT3 = 1.7320508075688772

# bp_multi-like baselines and spreads for the default five metrics
_BASELINE = {"congestion": 0.12, "rwl": 3.4, "wns": -6.8, "tns": -8000.0, "power": 1.02}
_SPREAD = {"congestion": 0.01, "rwl": 0.3, "wns": 0.3, "tns": 500.0, "power": 0.01}


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _unit_noise(seed: int, uid: int, k: int) -> float:
    """Zero-mean, unit-variance uniform noise from integer hashing only."""
    h = _splitmix64(_splitmix64(_splitmix64(seed & _MASK64) ^ (uid & _MASK64)) ^ k)
    u = (h >> 11) * (1.0 / (1 << 53))
    return _SQRT3 * (2.0 * u - 1.0)


@dataclass
class SyntheticOracle:
    """Deterministic stand-in for a physical-design PPA flow.

    ``metric_k = b_k + w_k . phi + eta * s_k * q_k(phi) + sigma * s_k * xi_k(uid)``

    where ``q_k`` is a fixed quadratic in ``phi[quad_coords]``, ``s_k`` the
    metric's spread and ``xi_k`` integer-hashed unit noise.  With
    ``eta = sigma = 0`` the world is exactly linear.  Ground-truth weights share
    a common "badness" direction (signed by orientation) plus an
    ``independence``-scaled private component per metric; pass ``weights``
    and ``intercepts`` to fix them explicitly.
    """

    seed: int = 0
    eta: float = 0.0
    sigma: float = 0.0
    independence: float = 0.5
    quad_coords: tuple[int, int] = (1, 7)
    delay_s: float = 0.0
    jitter_s: float = 0.0
    jitter_seed: int = 0
    schema: MetricSchema = field(default_factory=MetricSchema)
    weights: np.ndarray | None = None
    intercepts: np.ndarray | None = None

    def __post_init__(self):
        if self.eta < 0 or self.sigma < 0:
            raise ValueError("eta and sigma must be non-negative")
        self._cache: dict[int, tuple] = {}

    @property
    def tag(self) -> str:
        cfg = f"{self.seed}:{self.eta!r}:{self.sigma!r}:{self.independence!r}:{tuple(self.quad_coords)}"
        if self.weights is not None:
            cfg += hashlib.sha256(np.ascontiguousarray(self.weights, dtype=float).tobytes()).hexdigest()[:12]
        return "synthetic:" + hashlib.sha256(cfg.encode()).hexdigest()[:12]

    def ground_truth(self, d: int):
        """(weights K x d, intercepts K, quadratic coefficients K x 3, spreads K)."""
        if d not in self._cache:
            names = self.schema.names
            K = len(names)
            rng = np.random.default_rng([self.seed, d, 0xD0])
            spread = np.array([_SPREAD.get(n, 1.0) for n in names])
            if self.weights is not None:
                W = np.asarray(self.weights, dtype=float)
                if W.shape != (K, d):
                    raise ValueError(f"weights have shape {W.shape}, expected {(K, d)}")
            else:
                shared = rng.normal(size=d)
                orient = np.array([-1.0 if m.orientation == "higher" else 1.0 for m in self.schema.metrics])
                amp = rng.uniform(0.5, 1.5, size=K)
                private = rng.normal(size=(K, d))
                # 1/sqrt(d) keeps the swing across candidates near one spread
                W = (orient * amp * spread)[:, None] * (shared + self.independence * private) / np.sqrt(d)
            if self.intercepts is not None:
                b = np.asarray(self.intercepts, dtype=float)
                if b.shape != (K,):
                    raise ValueError(f"intercepts have shape {b.shape}, expected {(K,)}")
            else:
                b = np.array([_BASELINE.get(n, 0.0) for n in names])
            quad = rng.normal(size=(K, 3))
            self._cache[d] = (W, b, quad, spread)
        return self._cache[d]

    def metrics_vector(self, features, uid: int) -> np.ndarray:
        phi = np.asarray(features, dtype=float)
        W, b, quad, spread = self.ground_truth(phi.shape[0])
        out = b + W @ phi
        if self.eta:
            i, j = self.quad_coords
            if max(i, j) >= phi.shape[0]:
                raise ValueError(f"quad_coords {self.quad_coords} out of range for d={phi.shape[0]}")
            q = quad @ np.array([phi[i] * phi[i], phi[i] * phi[j], phi[j] * phi[j]])
            out = out + self.eta * spread * q
        if self.sigma:
            xi = np.array([_unit_noise(self.seed, int(uid), k) for k in range(len(out))])
            out = out + self.sigma * spread * xi
        return out

    def metrics(self, features, uid: int) -> dict[str, float]:
        return dict(zip(self.schema.names, self.metrics_vector(features, uid).tolist()))

    def record(self, features, uid: int, wall_seconds: float = 0.0) -> PpaRecord:
        return PpaRecord(int(uid), self.metrics(features, uid), self.tag, wall_seconds)

    def _delay(self, uid: int) -> float:
        if not self.jitter_s:
            return self.delay_s
        u = (_unit_noise(self.jitter_seed, int(uid), 0xA11) / _SQRT3 + 1.0) / 2.0
        return self.delay_s + self.jitter_s * u

    def evaluate(self, netlist: Netlist, partition: Partition, uid: int) -> PpaRecord:
        t0 = time.perf_counter()
        phi = feature_vector(netlist, partition)
        metrics = self.metrics(phi, uid)
        pause = self._delay(uid)
        if pause > 0:
            time.sleep(pause)
        return PpaRecord(int(uid), metrics, self.tag, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# external command backend


class EvaluationError(RuntimeError):
    def __init__(self, uid: int, message: str):
        self.uid = uid
        super().__init__(f"candidate {uid}: {message}")


class EvaluationTimeout(EvaluationError):
    pass


class EvaluationCommandError(EvaluationError):
    def __init__(self, uid: int, attempts: int, returncode: int, stderr: str = ""):
        self.attempts = attempts
        self.returncode = returncode
        self.stderr = stderr
        tail = stderr.strip().splitlines()[-3:]
        super().__init__(uid, f"command failed with exit {returncode} after {attempts} attempt(s) {tail}")


class MetricsFormatError(EvaluationError):
    pass


def write_candidate_file(path, netlist_path, partition: Partition, uid: int) -> None:
    lines = [f"netlist {Path(netlist_path).resolve()}", f"uid {uid}"]
    lines += [f"tier {m} {t}" for m, t in zip(partition.macro_ids, partition.tiers)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_file(path, uid: int, required: Sequence[str] = ()) -> dict[str, float]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MetricsFormatError(uid, f"cannot read metrics file: {exc}") from None
    metrics: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        if len(toks) != 3 or toks[0] != "metric":
            raise MetricsFormatError(uid, f"metrics line {lineno}: expected 'metric <name> <value>'")
        try:
            value = float(toks[2])
        except ValueError:
            raise MetricsFormatError(uid, f"metrics line {lineno}: bad value {toks[2]!r}") from None
        if not math.isfinite(value):
            raise MetricsFormatError(uid, f"metrics line {lineno}: non-finite value")
        metrics[toks[1]] = value
    missing = [n for n in required if n not in metrics]
    if missing:
        raise MetricsFormatError(uid, f"metrics file lacks {missing}")
    return metrics


def _timeout(default: float) -> float:
    env = os.environ.get(TIMEOUT_ENV)
    return float(env) if env else default


def external_evaluate(
    command_template: str,
    netlist_path,
    partition: Partition,
    uid: int,
    timeout_s: float = 3600.0,
    retries: int = 0,
    required: Sequence[str] = (),
    workdir=None,
    tag: str = "external",
) -> PpaRecord:
    """Run one external flow invocation in a private working directory.

    ``command_template`` is a shell command containing ``{input}`` and
    ``{output}``.  Nonzero exits are retried ``retries`` times; timeouts are
    not retried.
    """
    if "{input}" not in command_template or "{output}" not in command_template:
        raise ValueError("command template needs {input} and {output} placeholders")
    limit = _timeout(timeout_s)
    base = tempfile.mkdtemp(prefix=f"dopp-eval-{uid}-", dir=workdir)
    t0 = time.perf_counter()
    try:
        inp = Path(base) / "candidate.txt"
        out = Path(base) / "metrics.txt"
        write_candidate_file(inp, netlist_path, partition, uid)
        cmd = command_template.format(input=shlex.quote(str(inp)), output=shlex.quote(str(out)))
        attempts = 0
        while True:
            attempts += 1
            try:
                proc = subprocess.run(cmd, shell=True, cwd=base, capture_output=True, text=True, timeout=limit)
            except subprocess.TimeoutExpired:
                raise EvaluationTimeout(uid, f"timed out after {limit:g} s") from None
            if proc.returncode == 0:
                break
            if attempts > retries:
                raise EvaluationCommandError(uid, attempts, proc.returncode, proc.stderr)
        metrics = read_metrics_file(out, uid, required)
    finally:
        shutil.rmtree(base, ignore_errors=True)
    return PpaRecord(int(uid), metrics, tag, time.perf_counter() - t0)


@dataclass
class ExternalCommand:
    """Backend that shells out to a user flow per candidate."""

    command: str
    netlist_path: str
    timeout_s: float = 3600.0
    retries: int = 0
    required: tuple[str, ...] = tuple(m.name for m in DEFAULT_METRICS)
    workdir: str | None = None

    @property
    def tag(self) -> str:
        return "external:" + hashlib.sha256(self.command.encode()).hexdigest()[:12]

    def evaluate(self, netlist: Netlist, partition: Partition, uid: int) -> PpaRecord:
        return external_evaluate(
            self.command,
            self.netlist_path,
            partition,
            uid,
            timeout_s=self.timeout_s,
            retries=self.retries,
            required=self.required,
            workdir=self.workdir,
            tag=self.tag,
        )
