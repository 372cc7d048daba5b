import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopp.generate import bp_multi_like
from dopp.netlist import random_partition
from dopp.ppa import (
    DEFAULT_METRICS,
    TIMEOUT_ENV,
    EvaluationCommandError,
    EvaluationTimeout,
    ExternalCommand,
    MetricSchema,
    MetricsFormatError,
    PpaRecord,
    SyntheticOracle,
    composite_cost,
    composite_costs,
    external_evaluate,
    normalize_metrics,
    read_metrics_file,
)
from dopp.proxy import feature_vector

from . import oracles

NAMES = [m.name for m in DEFAULT_METRICS]
ORIENT = [(m.name, m.orientation) for m in DEFAULT_METRICS]


def rec(uid, **m):
    base = {"congestion": 0.1, "rwl": 3.0, "wns": -1.0, "tns": -10.0, "power": 1.0}
    base.update(m)
    return PpaRecord(uid, base)


def test_wns_orientation_example():
    recs = [rec(0, wns=-2.2), rec(1, wns=-1.1)]
    norm = normalize_metrics(recs)
    k = NAMES.index("wns")
    assert norm[:, k].tolist() == [1.0, 0.0]
    # constant columns are zero
    assert np.all(np.delete(norm, k, axis=1) == 0)


def test_composite_examples():
    assert composite_cost([0.6, 0.8]) == pytest.approx(1.0, abs=1e-15)
    assert composite_cost([0, 0, 0]) == 0.0
    assert composite_cost([1, 1], weights=[3, 4]) == pytest.approx(5.0)


def test_normalize_empty_and_missing():
    with pytest.raises(ValueError):
        normalize_metrics([])
    with pytest.raises(KeyError):
        normalize_metrics([PpaRecord(0, {"congestion": 1.0})])


def test_record_rejects_non_finite():
    with pytest.raises(ValueError):
        PpaRecord(0, {"power": float("nan")})


records_st = st.lists(
    st.tuples(*[st.floats(-1e4, 1e4, allow_nan=False) for _ in NAMES]), min_size=1, max_size=30
)


def _records(rows):
    return [PpaRecord(i, dict(zip(NAMES, r))) for i, r in enumerate(rows)]


@given(records_st)
@settings(max_examples=150, deadline=None)
def test_normalization_matches_oracle_and_bounds(rows):
    recs = _records(rows)
    norm = normalize_metrics(recs)
    want = oracles.normalize([r.metrics for r in recs], ORIENT)
    np.testing.assert_allclose(norm, np.array(want), atol=1e-12)
    costs = composite_costs(recs)
    assert np.all((costs >= 0) & (costs <= math.sqrt(5) + 1e-12))
    for r, c in zip(want, costs):
        assert c == pytest.approx(oracles.composite(r), abs=1e-12)
    # best value per metric maps to 0
    assert np.all(norm.min(axis=0) == 0)


@given(records_st, st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
@settings(max_examples=150, deadline=None)
def test_normalization_affine_invariant(rows, a, b):
    recs = _records(rows)
    moved = [PpaRecord(r.candidate_uid, {k: a * v + b for k, v in r.metrics.items()}) for r in recs]
    base = normalize_metrics(recs)
    # exact invariance holds up to the rounding of a*v+b; skip near-degenerate spans
    span = np.ptp(np.array([r.vector(NAMES) for r in recs]), axis=0)
    ok = (span == 0) | (span > 1e-6 * (1 + np.abs(np.array([r.vector(NAMES) for r in recs])).max(axis=0)))
    np.testing.assert_allclose(normalize_metrics(moved)[:, ok], base[:, ok], atol=1e-9)


def test_affine_invariance_tight_on_moderate_data():
    rng = np.random.default_rng(1)
    recs = _records(rng.normal(size=(50, 5)).tolist())
    moved = [PpaRecord(r.candidate_uid, {k: 2.5 * v + 7.0 for k, v in r.metrics.items()}) for r in recs]
    assert np.max(np.abs(normalize_metrics(moved) - normalize_metrics(recs))) <= 1e-12


def test_preferences():
    s = MetricSchema().with_preference("timing")
    assert [m.name for m in s.active] == ["wns", "tns"]
    w = MetricSchema().with_preference({"power": 2.0, "rwl": 1.0})
    assert [m.name for m in w.active] == ["rwl", "power"]
    recs = [rec(0, power=1.0, rwl=3.0), rec(1, power=2.0, rwl=4.0)]
    assert composite_costs(recs, w).tolist() == pytest.approx([0.0, math.sqrt(5)])
    with pytest.raises(ValueError):
        MetricSchema().with_preference("speed")
    with pytest.raises(ValueError):
        MetricSchema().with_preference({"area": 1.0})
    with pytest.raises(ValueError):
        MetricSchema().with_preference({"power": 0.0})
    assert MetricSchema.from_dict(w.to_dict()) == w


# ---------------------------------------------------------------------------
# synthetic oracle


def test_oracle_deterministic_and_uid_keyed():
    nl = bp_multi_like(0, n_logic=80, n_nets=200)
    phi = feature_vector(nl, random_partition(nl, 1))
    a = SyntheticOracle(seed=3, eta=1.0, sigma=0.1)
    b = SyntheticOracle(seed=3, eta=1.0, sigma=0.1)
    assert a.metrics(phi, 7) == b.metrics(phi, 7)
    assert a.metrics(phi, 7) != a.metrics(phi, 8)
    assert SyntheticOracle(seed=3).metrics(phi, 7) == SyntheticOracle(seed=3).metrics(phi, 8)
    assert a.tag == b.tag != SyntheticOracle(seed=4, eta=1.0, sigma=0.1).tag


def test_oracle_linear_world_exact():
    rng = np.random.default_rng(0)
    o = SyntheticOracle(seed=1)
    W, b, _, _ = o.ground_truth(9)
    X = rng.uniform(size=(20, 9))
    Y = np.array([o.metrics_vector(x, i) for i, x in enumerate(X)])
    np.testing.assert_allclose(Y, b + X @ W.T, rtol=0, atol=1e-12)
    # affine in the features: midpoint maps to midpoint
    mid = o.metrics_vector((X[0] + X[1]) / 2, 99)
    np.testing.assert_allclose(mid, (Y[0] + Y[1]) / 2, atol=1e-12)


def test_oracle_orientation_and_magnitudes():
    nl = bp_multi_like(0)
    o = SyntheticOracle(seed=0, eta=1.0, sigma=0.1)
    rows = [o.metrics(feature_vector(nl, random_partition(nl, s)), s) for s in range(30)]
    for name, lo, hi in [("congestion", 0.0, 0.5), ("rwl", 1.0, 10.0), ("wns", -20.0, 0.0), ("tns", -5e4, 0.0), ("power", 0.5, 2.0)]:
        assert all(lo < r[name] < hi for r in rows), name


def test_oracle_noise_is_unit_scale():
    o = SyntheticOracle(seed=5, sigma=1.0)
    z = SyntheticOracle(seed=5)
    phi = np.zeros(10)
    diffs = np.array([(o.metrics_vector(phi, u) - z.metrics_vector(phi, u)) for u in range(4000)])
    spread = o.ground_truth(10)[3]
    scaled = diffs / spread
    assert np.all(np.abs(scaled) <= math.sqrt(3) + 1e-12)
    assert np.abs(scaled.mean(axis=0)).max() < 0.06
    assert np.abs(scaled.std(axis=0) - 1).max() < 0.05


def test_oracle_explicit_weights():
    W = np.arange(15, dtype=float).reshape(5, 3)
    o = SyntheticOracle(weights=W, intercepts=np.zeros(5))
    assert o.metrics_vector([1.0, 0.0, 0.0], 0).tolist() == W[:, 0].tolist()
    with pytest.raises(ValueError):
        o.metrics_vector([1.0, 0.0], 0)
    with pytest.raises(ValueError):
        SyntheticOracle(eta=-1)


def test_oracle_evaluate_sleeps():
    nl = bp_multi_like(0, n_logic=40, n_nets=80)
    o = SyntheticOracle(delay_s=0.05)
    r = o.evaluate(nl, random_partition(nl, 0), 3)
    assert r.wall_seconds >= 0.05 and r.backend == o.tag


# ---------------------------------------------------------------------------
# external backend

STUB = textwrap.dedent(
    """
    import sys, time, pathlib
    inp, out, state, mode = sys.argv[1:5]
    st = pathlib.Path(state)
    n = int(st.read_text()) if st.exists() else 0
    st.write_text(str(n + 1))
    lines = pathlib.Path(inp).read_text().splitlines()
    assert lines[0].startswith("netlist ") and lines[1].startswith("uid ")
    tiers = [int(l.split()[2]) for l in lines[2:]]
    if mode.startswith("fail"):
        if n < int(mode[4:]):
            sys.stderr.write("flow crashed\\n")
            sys.exit(3)
    if mode == "sleep":
        time.sleep(5)
    if mode == "garbage":
        pathlib.Path(out).write_text("metric power\\n")
        sys.exit(0)
    with open(out, "w") as f:
        for name in ("congestion", "rwl", "wns", "tns", "power"):
            f.write(f"metric {name} {sum(tiers) + 0.5}\\n")
    """
)


@pytest.fixture
def stub(tmp_path):
    path = tmp_path / "stub.py"
    path.write_text(STUB)
    nl = bp_multi_like(0, n_logic=40, n_nets=80)
    nlp = tmp_path / "d.nl"
    from dopp.netlist import write_netlist

    write_netlist(nl, nlp)

    def make(mode, **kw):
        state = tmp_path / f"state-{mode}"
        cmd = f"{sys.executable} {path} {{input}} {{output}} {state} {mode}"
        return ExternalCommand(cmd, str(nlp), **kw), state

    return nl, make


def test_external_success(stub):
    nl, make = stub
    be, state = make("ok")
    p = random_partition(nl, 2)
    r = be.evaluate(nl, p, 11)
    assert r.candidate_uid == 11 and r.metrics["power"] == sum(p.tiers) + 0.5
    assert r.backend.startswith("external:")
    assert state.read_text() == "1"


def test_external_retries_count_attempts(stub):
    nl, make = stub
    be, state = make("fail2", retries=2)
    be.evaluate(nl, random_partition(nl, 0), 0)
    assert state.read_text() == "3"
    be, state = make("fail3", retries=2)
    with pytest.raises(EvaluationCommandError) as exc:
        be.evaluate(nl, random_partition(nl, 0), 0)
    assert exc.value.attempts == 3 and exc.value.returncode == 3
    assert "flow crashed" in str(exc.value)
    assert state.read_text() == "3"


def test_external_timeout_not_retried(stub, monkeypatch):
    nl, make = stub
    be, state = make("sleep", retries=3, timeout_s=60)
    monkeypatch.setenv(TIMEOUT_ENV, "0.5")
    with pytest.raises(EvaluationTimeout):
        be.evaluate(nl, random_partition(nl, 0), 0)
    assert state.read_text() == "1"


def test_external_malformed_metrics(stub):
    nl, make = stub
    be, _ = make("garbage")
    with pytest.raises(MetricsFormatError):
        be.evaluate(nl, random_partition(nl, 0), 0)


def test_external_template_needs_placeholders(tmp_path):
    nl = bp_multi_like(0, n_logic=40, n_nets=80)
    with pytest.raises(ValueError):
        external_evaluate("true {input}", tmp_path / "x.nl", random_partition(nl, 0), 0)


@pytest.mark.parametrize(
    "text, ok",
    [
        ("metric power 1.5\nmetric rwl 2 # comment\n\n", True),
        ("metric power\n", False),
        ("value power 1\n", False),
        ("metric power abc\n", False),
        ("metric power inf\n", False),
    ],
)
def test_read_metrics_file(tmp_path, text, ok):
    p = tmp_path / "m.txt"
    p.write_text(text)
    if ok:
        assert read_metrics_file(p, 0) == {"power": 1.5, "rwl": 2.0}
        with pytest.raises(MetricsFormatError):
            read_metrics_file(p, 0, required=["wns"])
    else:
        with pytest.raises(MetricsFormatError):
            read_metrics_file(p, 0)
