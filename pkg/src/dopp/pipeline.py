"""End-to-end flow: search, design, evaluate, fit, verify, select.

A run directory is the unit of reproducibility::

    netlist.nl          copy of the design
    candidates.ndjson   one archived candidate per line
    weights.json        design weights, solver metadata and the coreset
    evaluations.ndjson  append-only evaluation log (doubles as the cache)
    model.json          fitted surrogate, ranking and verification set
    report.json         {"result": deterministic summary, "timing": wall/cpu}
    meta.json           timestamps, environment, run status

Every document carries ``schema_version``.  Each evaluation line stores the
sha256 of its own canonical JSON, which :func:`report` re-checks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .design import CoresetSelection, DesignWeights, add_intercept, extract_coreset, solve_doptimal
from .generate import bp_multi_like, generate_netlist
from .netlist import Netlist, Partition, read_netlist, write_netlist
from .ppa import (
    EvalBackend,
    ExternalCommand,
    MetricSchema,
    PpaRecord,
    SyntheticOracle,
    composite_costs,
)
from .proxy import ProxyPoint, feature_names
from .search import Candidate, SAConfig, anneal
from .surrogate import SurrogateModel, fit_wls, predict, verification_set

__all__ = [
    "SCHEMA_VERSION",
    "PipelineConfig",
    "RunReport",
    "BatchResult",
    "EvaluationCache",
    "RunDirectory",
    "PipelineAbort",
    "IntegrityError",
    "load_netlist",
    "make_backend",
    "generate_candidates",
    "design_candidates",
    "evaluate_batch",
    "fit_surrogate",
    "select_final",
    "run_dopp",
    "budget_sweep",
    "multi_seed",
    "report",
    "format_report",
    "stage_generate",
    "stage_design",
    "stage_evaluate",
    "stage_fit",
    "stage_select",
]

SCHEMA_VERSION = 1
log = logging.getLogger(__name__)


class PipelineAbort(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _sha(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode("utf-8")).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **doc}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _read_json(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"missing artifact {path}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: corrupt JSON ({exc})") from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise IntegrityError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    netlist_path: str | None = None
    synthetic_netlist: dict | None = None
    sa: SAConfig = field(default_factory=SAConfig)
    threshold: float = 1e-2
    fallback_threshold: float | None = 5e-3
    min_coreset: int = 10
    verify_k: int = 10
    verify_mode: str = "new"
    label_mode: str = "coreset"
    design_tolerance: float = 1e-3
    design_max_iterations: int = 5000
    design_ridge_scale: float = 1e-8
    surrogate_ridge_scale: float = 1e-12
    fit_intercept: bool = True
    backend: dict = field(default_factory=lambda: {"kind": "synthetic"})
    preference: Any = "balanced"
    seeds: list = field(default_factory=lambda: [0])
    max_parallel_evals: int = 8
    coreset_failure_limit: float = 0.2
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.sa, Mapping):
            self.sa = SAConfig(**self.sa)
        if self.max_parallel_evals < 1:
            raise ValueError("max_parallel_evals must be >= 1")
        if self.verify_k < 0:
            raise ValueError("verify_k must be >= 0")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.min_coreset < 0:
            raise ValueError("min_coreset must be >= 0")
        if self.verify_mode not in ("new", "topk"):
            raise ValueError("verify_mode must be 'new' or 'topk'")
        if self.label_mode not in ("coreset", "metric"):
            raise ValueError("label_mode must be 'coreset' or 'metric'")
        if not 0 < self.coreset_failure_limit <= 1:
            raise ValueError("coreset_failure_limit must lie in (0, 1]")
        if self.backend.get("kind", "synthetic") not in ("synthetic", "external"):
            raise ValueError(f"unknown backend kind {self.backend.get('kind')!r}")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        self.schema()  # validates the preference

    def schema(self) -> MetricSchema:
        return MetricSchema().with_preference(self.preference)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["sa"] = self.sa.to_dict()
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown config key(s) {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, sa=replace(self.sa, seed=int(seed)))


def load_netlist(config: PipelineConfig) -> Netlist:
    if config.netlist_path:
        return read_netlist(config.netlist_path)
    spec = dict(config.synthetic_netlist or {"kind": "bp_multi_like"})
    kind = spec.pop("kind", "bp_multi_like")
    if kind == "bp_multi_like":
        return bp_multi_like(**spec)
    if kind == "generic":
        return generate_netlist(**spec)
    raise ValueError(f"unknown synthetic netlist kind {kind!r}")


def make_backend(spec: Mapping, netlist_path=None) -> EvalBackend:
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        if "quad_coords" in spec:
            spec["quad_coords"] = tuple(spec["quad_coords"])
        return SyntheticOracle(**spec)
    if kind == "external":
        if netlist_path is None:
            raise ValueError("external backend needs a netlist file")
        spec.setdefault("netlist_path", str(netlist_path))
        if "required" in spec:
            spec["required"] = tuple(spec["required"])
        return ExternalCommand(**spec)
    raise ValueError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# evaluation log / cache


class EvaluationCache:
    """Append-only evaluation log keyed by (netlist digest, assignment digest, backend tag).

    With ``path=None`` the cache lives in memory only.  Failed evaluations
    are logged but never served as hits.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._hits: dict[tuple[str, str, str], dict] = {}
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for entry in self.read_log(self.path):
                self._index(entry)

    @staticmethod
    def read_log(path) -> list[dict]:
        out = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    raise IntegrityError(f"{path}:{lineno}: corrupt line") from None
                digest = entry.pop("digest", None)
                if digest != _sha(entry):
                    raise IntegrityError(f"{path}:{lineno}: digest mismatch (evaluation log was modified)")
                out.append(entry)
        return out

    def _index(self, entry: dict) -> None:
        self.entries.append(entry)
        if entry["status"] == "ok":
            k = entry["key"]
            self._hits[(k["netlist"], k["assignment"], k["backend"])] = entry

    def get(self, netlist_digest: str, partition: Partition, tag: str, uid: int) -> PpaRecord | None:
        entry = self._hits.get((netlist_digest, partition.digest(), tag))
        if entry is None:
            return None
        return PpaRecord(int(uid), entry["metrics"], entry["backend"], 0.0)

    def append(self, netlist_digest: str, partition: Partition, tag: str, uid: int, record=None, error=None) -> None:
        entry = {
            "schema_version": SCHEMA_VERSION,
            "key": {"netlist": netlist_digest, "assignment": partition.digest(), "backend": tag},
            "uid": int(uid),
        }
        if record is not None:
            entry.update(status="ok", backend=record.backend, metrics=dict(record.metrics), wall_seconds=record.wall_seconds)
        else:
            entry.update(status="failed", error=str(error))
        with self._lock:
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(_canonical({**entry, "digest": _sha(entry)}) + "\n")
            self._index(entry)


@dataclass
class BatchResult:
    records: list[PpaRecord]
    failures: dict[int, str]
    evaluated: list[int]
    cached: list[int]
    wall_seconds: float
    cpu_seconds: float

    def by_uid(self) -> dict[int, PpaRecord]:
        return {r.candidate_uid: r for r in self.records}


def evaluate_batch(
    netlist: Netlist,
    items: Iterable[tuple[int, Partition]],
    backend: EvalBackend,
    max_parallel: int = 1,
    cache: EvaluationCache | None = None,
    submit_order: Sequence[int] | None = None,
) -> BatchResult:
    """Evaluate candidates on a bounded thread pool.

    Results are merged by uid, so neither ``submit_order`` nor completion
    order affects the output.  ``cpu_seconds`` sums per-evaluation wall time
    (the serial-equivalent cost); cache hits contribute nothing.
    """
    if max_parallel < 1:
        raise ValueError("max_parallel must be >= 1")
    todo = {int(u): p for u, p in items}
    nd = netlist.digest()
    tag = backend.tag
    found: dict[int, PpaRecord] = {}
    cached = []
    if cache is not None:
        for u in sorted(todo):
            hit = cache.get(nd, todo[u], tag, u)
            if hit is not None:
                found[u] = hit
                cached.append(u)
    pending = [u for u in sorted(todo) if u not in found]
    if submit_order is not None:
        rank = {int(u): i for i, u in enumerate(submit_order)}
        pending.sort(key=lambda u: (rank.get(u, len(rank)), u))

    failures: dict[int, str] = {}
    fresh: dict[int, PpaRecord] = {}
    t0 = time.perf_counter()
    if pending:
        with ThreadPoolExecutor(max_workers=min(max_parallel, len(pending))) as pool:
            futures = {pool.submit(backend.evaluate, netlist, todo[u], u): u for u in pending}
            for fut in as_completed(futures):
                u = futures[fut]
                try:
                    fresh[u] = fut.result()
                except Exception as exc:  # backend failures are data, not crashes
                    failures[u] = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0

    if cache is not None:
        for u in sorted(fresh.keys() | failures.keys()):
            cache.append(nd, todo[u], tag, u, record=fresh.get(u), error=failures.get(u))
    found.update(fresh)
    records = [found[u] for u in sorted(found)]
    cpu = math.fsum(fresh[u].wall_seconds for u in sorted(fresh))
    return BatchResult(records, dict(sorted(failures.items())), sorted(fresh), cached, wall, cpu)


# ---------------------------------------------------------------------------
# stages

_ANNEAL_MEMO: dict = {}
_DESIGN_MEMO: dict = {}
_MEMO_LIMIT = 64


def _memo_put(memo: dict, key, value):
    if len(memo) >= _MEMO_LIMIT:
        memo.pop(next(iter(memo)))
    memo[key] = value
    return value


def generate_candidates(netlist: Netlist, sa: SAConfig) -> list[Candidate]:
    """Annealed candidate set; memoised per (netlist, config) within the process."""
    key = (netlist.digest(), sa)
    if key not in _ANNEAL_MEMO:
        _memo_put(_ANNEAL_MEMO, key, tuple(anneal(netlist, sa)))
    return list(_ANNEAL_MEMO[key])


def _design_matrix(config: PipelineConfig, X: np.ndarray) -> np.ndarray:
    return add_intercept(X) if config.fit_intercept else X


def design_candidates(config: PipelineConfig, X: np.ndarray, uids: Sequence[int]) -> tuple[DesignWeights, CoresetSelection]:
    """Solve the design and threshold it, retrying with the fallback threshold if nothing survives."""
    A = _design_matrix(config, np.asarray(X, dtype=float))
    key = (hashlib.sha256(np.ascontiguousarray(A).tobytes()).hexdigest(), A.shape, config.design_tolerance, config.design_max_iterations, config.design_ridge_scale)
    if key not in _DESIGN_MEMO:
        _memo_put(_DESIGN_MEMO, key, solve_doptimal(A, config.design_tolerance, config.design_max_iterations, config.design_ridge_scale))
    dw = _DESIGN_MEMO[key]
    core = extract_coreset(dw.weights, config.threshold, config.min_coreset, uids)
    if not core.above_threshold and config.fallback_threshold is not None and config.fallback_threshold < config.threshold:
        log.info("no weight exceeds %g; falling back to %g", config.threshold, config.fallback_threshold)
        core = extract_coreset(dw.weights, config.fallback_threshold, config.min_coreset, uids)
    return dw, core


def _folded(records: Sequence[PpaRecord], schema: MetricSchema) -> np.ndarray:
    active = schema.active
    raw = np.array([r.vector([m.name for m in active]) for r in records], dtype=float).reshape(len(records), len(active))
    return raw * np.array([-1.0 if m.orientation == "higher" else 1.0 for m in active])


@dataclass
class SurrogateFit:
    model: SurrogateModel | list[SurrogateModel]
    labels: np.ndarray
    predictions: np.ndarray
    order: list[int]

    def to_dict(self) -> dict:
        models = self.model if isinstance(self.model, list) else [self.model]
        return {
            "models": [
                {
                    "theta": m.theta.tolist(),
                    "ridge": m.ridge,
                    "training_uids": list(m.training_uids),
                    "fit_residual_max": m.fit_residual_max,
                    "fit_intercept": m.fit_intercept,
                }
                for m in models
            ],
            "labels": self.labels.tolist(),
            "predictions": self.predictions.tolist(),
            "surrogate_order": list(self.order),
        }


def fit_surrogate(config: PipelineConfig, X: np.ndarray, uids: Sequence[int], weights: np.ndarray, train: Sequence[PpaRecord]) -> SurrogateFit:
    """Fit on evaluated coreset records and rank every candidate.

    ``label_mode="coreset"`` regresses the composite cost normalized over the
    training records.  ``label_mode="metric"`` regresses each preferred raw
    metric separately, then normalizes the predicted metrics over the whole
    candidate set and ranks by their composite.
    """
    if not train:
        raise PipelineAbort("no evaluated coreset candidates to fit")
    schema = config.schema()
    pos = {int(u): i for i, u in enumerate(uids)}
    rows = [pos[r.candidate_uid] for r in train]
    Xt, wt = X[rows], np.asarray(weights, dtype=float)[rows]
    if not np.any(wt > 0):
        wt = np.ones(len(rows))
    tuids = [r.candidate_uid for r in train]
    if config.label_mode == "coreset":
        labels = composite_costs(train, schema)
        model = fit_wls(Xt, wt, labels, tuids, config.surrogate_ridge_scale, config.fit_intercept)
        preds = np.atleast_1d(predict(model, X))
    else:
        raw = _folded(train, schema)
        model = [fit_wls(Xt, wt, raw[:, k], tuids, config.surrogate_ridge_scale, config.fit_intercept) for k in range(raw.shape[1])]
        pm = np.column_stack([np.atleast_1d(predict(m, X)) for m in model])
        lo, span = pm.min(axis=0), np.ptp(pm, axis=0)
        norm = np.where(span > 0, (pm - lo) / np.where(span > 0, span, 1.0), 0.0)
        w = np.array([m.weight for m in schema.active])
        preds = np.sqrt(np.sum((norm * w) ** 2, axis=1))
        labels = raw
    ids = np.asarray(uids)
    order = [int(ids[i]) for i in np.lexsort((ids, preds))]
    return SurrogateFit(model, labels, preds, order)


def select_final(records: Sequence[PpaRecord], schema: MetricSchema | None = None) -> int:
    """Argmin composite cost over ``records`` (normalized among themselves); lower uid wins ties."""
    if not records:
        raise ValueError("no evaluated records to select from")
    recs = sorted(records, key=lambda r: r.candidate_uid)
    costs = composite_costs(recs, schema or MetricSchema())
    uids = np.array([r.candidate_uid for r in recs])
    return int(uids[np.lexsort((uids, costs))[0]])


# ---------------------------------------------------------------------------
# run directory


def _candidate_doc(c: Candidate) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "uid": c.uid,
        "assignment": c.partition.assignment,
        "proxy": asdict(c.proxy),
        "features": [float(x) for x in c.features],
    }


class RunDirectory:
    NETLIST = "netlist.nl"
    CANDIDATES = "candidates.ndjson"
    WEIGHTS = "weights.json"
    EVALUATIONS = "evaluations.ndjson"
    MODEL = "model.json"
    REPORT = "report.json"
    META = "meta.json"
    SWEEP = "sweep.json"
    SEEDS = "seeds.json"
    CONFIG = "config.json"

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def init(self, config: PipelineConfig, netlist: Netlist) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        nl_path = self.path(self.NETLIST)
        if nl_path.exists():
            if read_netlist(nl_path).digest() != netlist.digest():
                raise PipelineAbort(f"{self.root} already holds a different netlist")
        else:
            write_netlist(netlist, nl_path)
        _write_json(self.path(self.CONFIG), {"config": config.to_dict()})

    def config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(_read_json(self.path(self.CONFIG))["config"])

    def netlist(self) -> Netlist:
        return read_netlist(self.path(self.NETLIST))

    def cache(self) -> EvaluationCache:
        return EvaluationCache(self.path(self.EVALUATIONS))

    def save_candidates(self, candidates: Sequence[Candidate]) -> None:
        with open(self.path(self.CANDIDATES), "w", encoding="utf-8") as fh:
            for c in candidates:
                fh.write(_canonical(_candidate_doc(c)) + "\n")

    def load_candidates(self, netlist: Netlist) -> list[Candidate]:
        out = []
        with open(self.path(self.CANDIDATES), encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    part = Partition.from_mapping(netlist, doc["assignment"])
                    out.append(Candidate(int(doc["uid"]), part, ProxyPoint(**doc["proxy"]), np.array(doc["features"], dtype=float)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise IntegrityError(f"{self.CANDIDATES}:{lineno}: {exc}") from None
        return out

    def save_weights(self, dw: DesignWeights, core: CoresetSelection, uids: Sequence[int], design_dim: int) -> None:
        _write_json(
            self.path(self.WEIGHTS),
            {
                "weights": [{"uid": int(u), "weight": float(w)} for u, w in zip(uids, dw.weights)],
                "solver": _design_info(dw, design_dim),
                "coreset": _coreset_info(core),
            },
        )

    def load_weights(self) -> tuple[np.ndarray, list[int], dict]:
        doc = _read_json(self.path(self.WEIGHTS))
        w = np.array([e["weight"] for e in doc["weights"]], dtype=float)
        return w, [int(e["uid"]) for e in doc["weights"]], doc

    def save_model(self, fit: SurrogateFit, verify: Sequence[int], config: PipelineConfig, d: int) -> None:
        _write_json(
            self.path(self.MODEL),
            {
                "label_mode": config.label_mode,
                "feature_dim": d,
                "intercept_appended": config.fit_intercept,
                "verify_k": config.verify_k,
                "verify_mode": config.verify_mode,
                "verification_uids": list(verify),
                **fit.to_dict(),
            },
        )

    def load_model(self) -> dict:
        return _read_json(self.path(self.MODEL))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_meta(rd: RunDirectory, status: str, started: str, extra: dict | None = None) -> None:
    from . import __version__

    _write_json(
        rd.path(rd.META),
        {
            "status": status,
            "started": started,
            "finished": _now(),
            "dopp_version": __version__,
            "python": platform.python_version(),
            "platform": platform.platform(),
            **(extra or {}),
        },
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    result: dict
    timing: dict

    @property
    def best_uid(self) -> int:
        return self.result["best"]["uid"]

    @property
    def best_cost(self) -> float:
        return self.result["best"]["composite_cost"]

    @property
    def total_evaluations(self) -> int:
        return self.result["evaluations"]["total"]

    @property
    def candidate_count(self) -> int:
        return self.result["candidate_count"]

    @property
    def evaluated_uids(self) -> list[int]:
        return self.result["evaluations"]["evaluated_uids"]

    def result_bytes(self) -> bytes:
        return _canonical(self.result).encode("utf-8")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "result": self.result, "timing": self.timing}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunReport":
        return cls(doc["result"], doc["timing"])


def _config_summary(config: PipelineConfig) -> dict:
    doc = config.to_dict()
    doc.pop("output_dir", None)
    return doc


# ---------------------------------------------------------------------------
# full run


def _design_info(dw: DesignWeights, design_dim: int) -> dict:
    return {
        "iterations": dw.iterations,
        "gap": dw.gap,
        "ridge": dw.ridge,
        "converged": dw.converged,
        "tolerance": dw.tolerance,
        "support_size": dw.support_size,
        "support_bound": design_dim * (design_dim + 1) // 2,
        "design_dim": design_dim,
    }


def _coreset_info(core: CoresetSelection) -> dict:
    return {
        "uids": list(core.indices),
        "size": len(core.indices),
        "threshold_used": core.threshold_used,
        "min_size": core.min_size,
        "above_threshold": list(core.above_threshold),
    }


def _build_result(
    netlist: Netlist,
    config: PipelineConfig,
    backend_tag: str,
    n_candidates: int,
    design: dict,
    coreset: dict,
    verify: Sequence[int],
    model: dict,
    records: Mapping[int, PpaRecord],
    failures: Mapping[int, str],
) -> dict:
    schema = config.schema()
    ordered = [records[u] for u in sorted(records)]
    best = select_final(ordered, schema)
    costs = dict(zip(sorted(records), composite_costs(ordered, schema).tolist()))
    d = len(feature_names(netlist))
    return {
        "netlist": {
            "name": netlist.name,
            "digest": netlist.digest(),
            "macros": netlist.num_macros,
            "nets": netlist.num_nets,
            "clusters": len(netlist.clusters),
        },
        "config": _config_summary(config),
        "backend": backend_tag,
        "candidate_count": n_candidates,
        "feature_dim": d,
        "intercept_appended": config.fit_intercept,
        "design": design,
        "coreset": coreset,
        "verification": {"mode": config.verify_mode, "uids": [int(u) for u in verify]},
        "label_mode": config.label_mode,
        "normalization": "evaluated-union",
        "model": {
            "fit_residual_max": max(m["fit_residual_max"] for m in model["models"]),
            "ridge": model["models"][0]["ridge"],
            "surrogate_top": model["surrogate_order"][: max(config.verify_k, 10)],
        },
        "evaluations": {
            "total": coreset["size"] + len(verify),
            "coreset": coreset["size"],
            "verification": len(verify),
            "failed": {str(k): v for k, v in sorted(failures.items())},
            "evaluated_uids": sorted(records),
        },
        "best": {
            "uid": best,
            "metrics": dict(records[best].metrics),
            "backend": records[best].backend,
            "composite_cost": costs[best],
        },
    }


def run_dopp(
    config: PipelineConfig,
    netlist: Netlist | None = None,
    backend: EvalBackend | None = None,
    out_dir=None,
    submit_order_seed: int | None = None,
    cache: EvaluationCache | None = None,
) -> RunReport:
    """Execute the full flow and return its report.

    With ``out_dir`` (or ``config.output_dir``) every artifact is written to
    that run directory and its evaluation log is reused as a cache.
    ``submit_order_seed`` shuffles the order in which evaluations are handed
    to the worker pool; the report must not depend on it.  Without a run
    directory, ``cache`` (default: a fresh in-memory one) collects the
    evaluations.
    """
    started = _now()
    t_run = time.perf_counter()
    timing: dict[str, float] = {}
    netlist = netlist if netlist is not None else load_netlist(config)
    out_dir = out_dir if out_dir is not None else config.output_dir
    rd = RunDirectory(out_dir) if out_dir is not None else None
    if rd is not None:
        rd.init(config, netlist)
    if backend is None:
        backend = make_backend(config.backend, rd.path(rd.NETLIST) if rd else config.netlist_path)
    if rd is not None:
        cache = rd.cache()
    elif cache is None:
        cache = EvaluationCache()
    shuffle = np.random.default_rng(submit_order_seed) if submit_order_seed is not None else None

    def order_for(uids):
        return None if shuffle is None else [int(u) for u in shuffle.permutation(sorted(uids))]

    t = time.perf_counter()
    candidates = generate_candidates(netlist, config.sa)
    timing["anneal"] = time.perf_counter() - t
    if not candidates:
        raise PipelineAbort("annealing produced no candidates")
    if rd is not None:
        rd.save_candidates(candidates)
    uids = [c.uid for c in candidates]
    by_uid = {c.uid: c for c in candidates}
    X = np.array([c.features for c in candidates])
    d = X.shape[1]

    t = time.perf_counter()
    dw, core = design_candidates(config, X, uids)
    timing["design"] = time.perf_counter() - t
    if rd is not None:
        rd.save_weights(dw, core, uids, d + int(config.fit_intercept))

    def run_batch(sel):
        return evaluate_batch(
            netlist, [(u, by_uid[u].partition) for u in sel], backend, config.max_parallel_evals, cache, order_for(sel)
        )

    b1 = run_batch(core.indices)
    timing["evaluate_coreset"] = b1.wall_seconds
    _check_failures(rd, config, core.indices, b1.failures, started)

    t = time.perf_counter()
    fit = fit_surrogate(config, X, uids, dw.weights, b1.records)
    verify = verification_set(fit.order, core.indices, config.verify_k, config.verify_mode)
    timing["fit"] = time.perf_counter() - t
    if rd is not None:
        rd.save_model(fit, verify, config, d)

    b2 = run_batch(verify)
    timing["evaluate_verify"] = b2.wall_seconds

    t = time.perf_counter()
    records = {**b1.by_uid(), **b2.by_uid()}
    result = _build_result(
        netlist,
        config,
        backend.tag,
        len(candidates),
        _design_info(dw, d + int(config.fit_intercept)),
        _coreset_info(core),
        verify,
        fit.to_dict(),
        records,
        {**b1.failures, **b2.failures},
    )
    timing["select"] = time.perf_counter() - t
    timing["total"] = time.perf_counter() - t_run
    timing.update(
        eval_wall_seconds=b1.wall_seconds + b2.wall_seconds,
        eval_cpu_seconds=b1.cpu_seconds + b2.cpu_seconds,
        cached=len(b1.cached) + len(b2.cached),
    )
    rep = RunReport(result, timing)
    if rd is not None:
        _write_json(rd.path(rd.REPORT), rep.to_dict())
        _write_meta(rd, "complete", started)
    return rep


def _check_failures(rd, config: PipelineConfig, coreset_uids, failures: Mapping[int, str], started: str) -> None:
    if coreset_uids and len(failures) >= config.coreset_failure_limit * len(coreset_uids):
        msg = f"{len(failures)}/{len(coreset_uids)} coreset evaluations failed"
        if rd is not None:
            _write_meta(rd, "aborted", started, {"reason": msg, "failures": {str(k): v for k, v in failures.items()}})
        raise PipelineAbort(msg)


# ---------------------------------------------------------------------------
# staged execution over a run directory (used by the CLI)


def _stage_context(rd: RunDirectory, backend: EvalBackend | None = None):
    config = rd.config()
    netlist = rd.netlist()
    if backend is None:
        backend = make_backend(config.backend, rd.path(rd.NETLIST))
    return config, netlist, backend


def stage_generate(config: PipelineConfig, out_dir, netlist: Netlist | None = None) -> list[Candidate]:
    netlist = netlist if netlist is not None else load_netlist(config)
    rd = RunDirectory(out_dir)
    rd.init(config, netlist)
    candidates = generate_candidates(netlist, config.sa)
    if not candidates:
        raise PipelineAbort("annealing produced no candidates")
    rd.save_candidates(candidates)
    return candidates


def stage_design(out_dir) -> CoresetSelection:
    rd = RunDirectory(out_dir)
    config, netlist = rd.config(), rd.netlist()
    candidates = rd.load_candidates(netlist)
    uids = [c.uid for c in candidates]
    X = np.array([c.features for c in candidates])
    dw, core = design_candidates(config, X, uids)
    rd.save_weights(dw, core, uids, X.shape[1] + int(config.fit_intercept))
    return core


def stage_evaluate(out_dir, uids: Sequence[int] | None = None, which: str = "coreset", backend: EvalBackend | None = None) -> BatchResult:
    """Evaluate explicit uids, or the coreset / verification set recorded in the run directory."""
    rd = RunDirectory(out_dir)
    config, netlist, backend = _stage_context(rd, backend)
    by_uid = {c.uid: c for c in rd.load_candidates(netlist)}
    explicit = uids is not None
    if not explicit:
        if which == "coreset":
            uids = _read_json(rd.path(rd.WEIGHTS))["coreset"]["uids"]
        elif which == "verify":
            uids = rd.load_model()["verification_uids"]
        else:
            raise ValueError("which must be 'coreset' or 'verify'")
    unknown = [u for u in uids if u not in by_uid]
    if unknown:
        raise KeyError(f"unknown candidate uid(s) {unknown[:5]}")
    batch = evaluate_batch(netlist, [(u, by_uid[u].partition) for u in uids], backend, config.max_parallel_evals, rd.cache())
    if not explicit and which == "coreset":
        _check_failures(rd, config, uids, batch.failures, _now())
    return batch


def _logged_records(rd: RunDirectory, netlist: Netlist, by_uid, uids, tag: str) -> dict[int, PpaRecord]:
    cache = rd.cache()
    out = {}
    for u in uids:
        rec = cache.get(netlist.digest(), by_uid[u].partition, tag, u)
        if rec is not None:
            out[int(u)] = rec
    return out


def _logged_failures(rd: RunDirectory, uids, tag: str) -> dict[int, str]:
    want = set(int(u) for u in uids)
    ok = set()
    failed = {}
    for e in rd.cache().entries:
        if e["key"]["backend"] != tag or e["uid"] not in want:
            continue
        if e["status"] == "ok":
            ok.add(e["uid"])
        else:
            failed[e["uid"]] = e["error"]
    return {u: m for u, m in failed.items() if u not in ok}


def stage_fit(out_dir, backend: EvalBackend | None = None) -> list[int]:
    """Fit the surrogate on logged coreset evaluations; returns the verification uids."""
    rd = RunDirectory(out_dir)
    config, netlist, backend = _stage_context(rd, backend)
    candidates = rd.load_candidates(netlist)
    by_uid = {c.uid: c for c in candidates}
    uids = [c.uid for c in candidates]
    X = np.array([c.features for c in candidates])
    w, wuids, doc = rd.load_weights()
    if wuids != uids:
        raise IntegrityError("weights.json does not match candidates.ndjson")
    core = doc["coreset"]["uids"]
    recs = _logged_records(rd, netlist, by_uid, core, backend.tag)
    if len(core) - len(recs) >= config.coreset_failure_limit * max(len(core), 1):
        raise PipelineAbort(f"only {len(recs)}/{len(core)} coreset candidates have evaluations")
    fit = fit_surrogate(config, X, uids, w, [recs[u] for u in sorted(recs)])
    verify = verification_set(fit.order, core, config.verify_k, config.verify_mode)
    rd.save_model(fit, verify, config, X.shape[1])
    return verify


def stage_select(out_dir, backend: EvalBackend | None = None) -> RunReport:
    """Select over every logged evaluation of the coreset and verification set and write report.json."""
    started = _now()
    rd = RunDirectory(out_dir)
    config, netlist, backend = _stage_context(rd, backend)
    candidates = rd.load_candidates(netlist)
    by_uid = {c.uid: c for c in candidates}
    _, _, wdoc = rd.load_weights()
    model = rd.load_model()
    core, verify = wdoc["coreset"]["uids"], model["verification_uids"]
    wanted = list(core) + [u for u in verify if u not in set(core)]
    records = _logged_records(rd, netlist, by_uid, wanted, backend.tag)
    if not records:
        raise PipelineAbort("no evaluations logged for the coreset or verification set")
    failures = _logged_failures(rd, wanted, backend.tag)
    solver = dict(wdoc["solver"])
    result = _build_result(netlist, config, backend.tag, len(candidates), solver, wdoc["coreset"], verify, model, records, failures)
    wall = {e["uid"]: e.get("wall_seconds", 0.0) for e in rd.cache().entries if e["status"] == "ok" and e["key"]["backend"] == backend.tag}
    timing = {"eval_cpu_seconds": math.fsum(wall.get(u, 0.0) for u in sorted(records)), "staged": True}
    rep = RunReport(result, timing)
    _write_json(rd.path(rd.REPORT), rep.to_dict())
    _write_meta(rd, "complete", started)
    return rep


# ---------------------------------------------------------------------------
# budget sweep and multi-seed protocol


def budget_sweep(
    config: PipelineConfig,
    fractions: Sequence[float],
    netlist: Netlist | None = None,
    backend: EvalBackend | None = None,
    out_dir=None,
    min_evals: int = 10,
) -> dict:
    """Best cost after evaluating the top ``ceil(f * N)`` candidates by design weight.

    All prefixes share one cache, and costs are normalized once over the
    union of everything the sweep evaluated, so the curve is non-increasing.
    """
    fr = sorted(float(f) for f in fractions)
    if not fr or fr[0] <= 0 or fr[-1] > 1:
        raise ValueError("fractions must lie in (0, 1]")
    netlist = netlist if netlist is not None else load_netlist(config)
    out_dir = out_dir if out_dir is not None else config.output_dir
    rd = RunDirectory(out_dir) if out_dir is not None else None
    if rd is not None:
        rd.init(config, netlist)
    if backend is None:
        backend = make_backend(config.backend, rd.path(rd.NETLIST) if rd else config.netlist_path)
    cache = rd.cache() if rd is not None else EvaluationCache()
    candidates = generate_candidates(netlist, config.sa)
    uids = [c.uid for c in candidates]
    X = np.array([c.features for c in candidates])
    dw, _ = design_candidates(config, X, uids)
    ids = np.array(uids)
    ranked = [int(ids[i]) for i in np.lexsort((ids, -dw.weights))]
    N = len(ranked)
    sizes = [min(N, max(math.ceil(f * N - 1e-9), min_evals)) for f in fr]

    by_uid = {c.uid: c for c in candidates}
    batch = evaluate_batch(
        netlist, [(u, by_uid[u].partition) for u in ranked[: max(sizes)]], backend, config.max_parallel_evals, cache
    )
    rec = batch.by_uid()
    pool = [rec[u] for u in sorted(rec)]
    schema = config.schema()
    costs = dict(zip(sorted(rec), composite_costs(pool, schema).tolist()))
    curve = []
    for f, n in zip(fr, sizes):
        got = [u for u in ranked[:n] if u in costs]
        best = min(got, key=lambda u: (costs[u], u)) if got else None
        curve.append({"fraction": f, "evaluations": n, "best_uid": best, "best_cost": costs[best] if best is not None else None})
    out = {
        "candidate_count": N,
        "normalization": "sweep-union",
        "curve": curve,
        "failures": {str(k): v for k, v in batch.failures.items()},
    }
    if rd is not None:
        _write_json(rd.path(rd.SWEEP), out)
    return out


def _summary(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=float)
    return {"median": float(np.median(a)), "min": float(a.min()), "max": float(a.max())}


def multi_seed(
    config: PipelineConfig,
    seeds: Sequence[int] | None = None,
    netlist: Netlist | None = None,
    backend: EvalBackend | None = None,
    out_dir=None,
    exhaustive: bool = False,
) -> dict:
    """Independent runs per annealing seed plus a random arm of matched size.

    Selected candidates of all arms are compared on one cost scale:
    normalization over the full candidate set when ``exhaustive`` is set,
    otherwise over the union of records the arms evaluated.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    netlist = netlist if netlist is not None else load_netlist(config)
    out_dir = out_dir if out_dir is not None else config.output_dir
    root = Path(out_dir) if out_dir is not None else None
    schema = config.schema()
    per_seed = []
    for seed in seeds:
        cfg = config.with_seed(seed)
        sub = root / f"seed_{seed}" if root is not None else None
        be = backend
        if be is None:
            be = make_backend(cfg.backend, (sub / RunDirectory.NETLIST) if sub else cfg.netlist_path)
            if sub is not None:
                RunDirectory(sub).init(cfg, netlist)
        cache = EvaluationCache()
        rep = run_dopp(cfg, netlist, be, sub, cache=cache)
        if sub is not None:
            cache = RunDirectory(sub).cache()
        candidates = generate_candidates(netlist, cfg.sa)
        by_uid = {c.uid: c for c in candidates}
        N = len(candidates)
        n = min(rep.total_evaluations, N)
        rng = np.random.default_rng([int(seed), 0x5EED])
        rnd = sorted(int(u) for u in rng.choice(N, size=n, replace=False))
        rb = evaluate_batch(netlist, [(u, by_uid[u].partition) for u in rnd], be, cfg.max_parallel_evals, cache)
        arms = {"dopp": rep.evaluated_uids, "random": sorted(rb.by_uid())}
        if exhaustive:
            eb = evaluate_batch(netlist, [(c.uid, c.partition) for c in candidates], be, cfg.max_parallel_evals, cache)
            pool_rec = eb.by_uid()
            arms["exhaustive"] = sorted(pool_rec)
        else:
            pool_rec = dict(rb.by_uid())
            for u in rep.evaluated_uids:
                if u not in pool_rec:
                    pool_rec[u] = cache.get(netlist.digest(), by_uid[u].partition, be.tag, u)
        pool = [pool_rec[u] for u in sorted(pool_rec)]
        ref = dict(zip(sorted(pool_rec), composite_costs(pool, schema).tolist()))
        entry = {"seed": int(seed), "candidate_count": N, "evaluations": n, "reference": "exhaustive" if exhaustive else "union"}
        for arm, evaluated in arms.items():
            uid = rep.best_uid if arm == "dopp" else select_final([pool_rec[u] for u in evaluated], schema)
            entry[arm] = {"uid": uid, "metrics": dict(pool_rec[uid].metrics), "cost": ref[uid]}
        per_seed.append(entry)

    summary = {}
    for arm in per_seed[0]:
        if not isinstance(per_seed[0][arm], dict):
            continue
        names = list(per_seed[0][arm]["metrics"])
        summary[arm] = {m: _summary([e[arm]["metrics"][m] for e in per_seed]) for m in names}
        summary[arm]["cost"] = _summary([e[arm]["cost"] for e in per_seed])
    wins = sum(e["dopp"]["cost"] <= e["random"]["cost"] for e in per_seed)
    out = {"seeds": per_seed, "summary": summary, "dopp_not_worse_than_random": wins, "trials": len(per_seed)}
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        _write_json(root / RunDirectory.SEEDS, out)
    return out


# ---------------------------------------------------------------------------
# report


def report(run_dir) -> dict:
    """Validate a run directory and summarise it.

    Raises :class:`IntegrityError` when the evaluation log fails its digests
    or disagrees with the stored report.
    """
    rd = RunDirectory(run_dir)
    out: dict = {"run_dir": str(rd.root)}
    entries = EvaluationCache.read_log(rd.path(rd.EVALUATIONS)) if rd.exists(rd.EVALUATIONS) else []
    ok = [e for e in entries if e["status"] == "ok"]
    out["log"] = {"lines": len(entries), "ok": len(ok), "failed": len(entries) - len(ok)}
    if rd.exists(rd.CANDIDATES):
        with open(rd.path(rd.CANDIDATES), encoding="utf-8") as fh:
            out["candidate_lines"] = sum(1 for line in fh if line.strip())
    if rd.exists(rd.REPORT):
        doc = _read_json(rd.path(rd.REPORT))
        res, timing = doc["result"], doc["timing"]
        logged = {e["uid"]: e for e in ok}
        missing = [u for u in res["evaluations"]["evaluated_uids"] if u not in logged]
        if missing:
            raise IntegrityError(f"report lists evaluated uid(s) {missing[:5]} absent from the evaluation log")
        best = res["best"]
        if logged[best["uid"]]["metrics"] != best["metrics"]:
            raise IntegrityError(f"best candidate {best['uid']} metrics disagree with the evaluation log")
        if out.get("candidate_lines", res["candidate_count"]) != res["candidate_count"]:
            raise IntegrityError("candidate count disagrees with candidates.ndjson")
        out["run"] = {
            "candidates": res["candidate_count"],
            "feature_dim": res["feature_dim"],
            "coreset": res["coreset"]["size"],
            "verification": res["evaluations"]["verification"],
            "eval_times": res["evaluations"]["total"],
            "failed": len(res["evaluations"]["failed"]),
            "best_uid": best["uid"],
            "best_cost": best["composite_cost"],
            "best_metrics": best["metrics"],
            "cpu_seconds": timing.get("eval_cpu_seconds"),
            "wall_seconds": timing.get("total"),
            "eval_wall_seconds": timing.get("eval_wall_seconds"),
        }
    if rd.exists(rd.SWEEP):
        out["sweep"] = _read_json(rd.path(rd.SWEEP))["curve"]
    if rd.exists(rd.SEEDS):
        seeds = _read_json(rd.path(rd.SEEDS))
        out["seeds"] = {"summary": seeds["summary"], "dopp_not_worse_than_random": seeds["dopp_not_worse_than_random"], "trials": seeds["trials"]}
    if rd.exists(rd.META):
        out["status"] = _read_json(rd.path(rd.META)).get("status")
    if len(out) <= 2:
        raise FileNotFoundError(f"{rd.root} holds no run artifacts")
    return out


def format_report(summary: Mapping) -> str:
    lines = [f"run directory: {summary['run_dir']}"]
    if "status" in summary:
        lines.append(f"status: {summary['status']}")
    if "run" in summary:
        r = summary["run"]
        lines += [
            f"candidates N: {r['candidates']}  (d = {r['feature_dim']}, intercept excluded)",
            f"coreset |K|: {r['coreset']}  verification: {r['verification']}",
            f"eval times: {r['eval_times']}  failed: {r['failed']}",
            f"best uid: {r['best_uid']}  composite cost: {r['best_cost']:.6g}",
            "best metrics: " + ", ".join(f"{k}={v:.6g}" for k, v in r["best_metrics"].items()),
        ]
        times = [("cpu time (sum of evals)", r["cpu_seconds"]), ("eval wall", r["eval_wall_seconds"]), ("total wall", r["wall_seconds"])]
        lines.append("  ".join(f"{k}: {v:.3f} s" for k, v in times if v is not None))
    if "sweep" in summary:
        lines.append("budget sweep:")
        lines.append("  fraction  evals  best_uid  best_cost")
        for p in summary["sweep"]:
            cost = "n/a" if p["best_cost"] is None else f"{p['best_cost']:.6g}"
            lines.append(f"  {p['fraction']:8.3f}  {p['evaluations']:5d}  {str(p['best_uid']):>8}  {cost}")
    if "seeds" in summary:
        s = summary["seeds"]
        lines.append(f"multi-seed: dopp <= random in {s['dopp_not_worse_than_random']}/{s['trials']} trials")
        for arm, stats in s["summary"].items():
            c = stats["cost"]
            lines.append(f"  {arm:10s} cost median {c['median']:.4g} [{c['min']:.4g}, {c['max']:.4g}]")
    lines.append(f"evaluation log: {summary['log']['lines']} lines ({summary['log']['failed']} failed)")
    return "\n".join(lines)
