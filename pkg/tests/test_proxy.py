from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopp.generate import bp_multi_like
from dopp.netlist import Cell, Net, Netlist, Partition, random_partition
from dopp.proxy import (
    PartitionFeaturizer,
    ProxyPoint,
    area_imbalance,
    cohesion,
    cut_size,
    feature_matrix,
    feature_names,
    feature_vector,
    proxy_features,
    proxy_point,
    sa_objective,
)

from . import oracles


def cluster_netlist(s=10, m=3):
    """One cluster ``h`` with ``s`` logic cells and ``m`` macros, plus a macro elsewhere."""
    cells = [Cell(f"g{i}", 1.0, "logic", "h") for i in range(s)]
    cells += [Cell(f"m{i}", 2.0, "macro", "h") for i in range(m)]
    cells += [Cell("x", 5.0, "macro", "other")]
    nets = [Net("n0", ("g0", "m0")), Net("n1", ("m1", "x"))]
    return Netlist("c", tuple(cells), tuple(nets))


def test_cohesion_worked_example():
    nl = cluster_netlist()
    p = Partition.from_mapping(nl, {"m0": 0, "m1": 0, "m2": 1, "x": 1})
    assert cohesion(nl, p, "h", exact=True) == Fraction(21, 33)
    assert cohesion(nl, p, "h") == pytest.approx(21 / 33, abs=0)


def test_cohesion_is_not_tier_symmetric():
    nl = cluster_netlist()
    p = Partition.from_mapping(nl, {"m0": 0, "m1": 0, "m2": 1, "x": 0})
    q = Partition.from_mapping(nl, {"m0": 1, "m1": 1, "m2": 0, "x": 1})
    assert cohesion(nl, p, "h", exact=True) == Fraction(21, 33)
    assert cohesion(nl, q, "h", exact=True) == Fraction(10, 33)


def test_cohesion_degenerate_cluster_is_one():
    nl = cluster_netlist()
    # "other" holds a lone macro and no logic: no pairs to count
    for t in (0, 1):
        p = Partition.from_mapping(nl, {"m0": 0, "m1": 0, "m2": 0, "x": t})
        assert cohesion(nl, p, "other") == 1.0


def test_cohesion_unknown_cluster():
    nl = cluster_netlist()
    with pytest.raises(KeyError):
        cohesion(nl, random_partition(nl, 0), "nope")


def test_single_cluster_feature_dim():
    cells = (Cell("a", 1, "logic"), Cell("m", 3, "macro"), Cell("k", 4, "macro"))
    nl = Netlist("one", cells, (Net("n", ("a", "m", "k")),))
    assert feature_vector(nl, random_partition(nl, 0)).shape == (8,)
    assert feature_names(nl)[-1] == "coh[_root]"


def test_features_without_cut():
    nl = cluster_netlist()
    p = Partition.from_mapping(nl, {"m0": 0, "m1": 0, "m2": 0, "x": 0})
    f = proxy_features(nl, p)
    assert f[0] == 0 and list(f[3:7]) == [0, 0, 0, 0]
    # all area on one tier
    assert f[1] == 1.0 and f[2] == 1.0


def test_area_imbalance_examples():
    assert area_imbalance(10.0, 5.0) == 0.0
    assert area_imbalance(10.0, 0.0) == 1.0
    assert area_imbalance(10.0, 7.5) == pytest.approx(0.5)
    assert area_imbalance(0.0, 0.0) == 0.0


def test_sa_objective():
    p = ProxyPoint(cut_size=3, num_nets=12, area_imbalance=0.5, area_tier0=1, area_tier1=3, macros_tier0=1, macros_tier1=1)
    assert sa_objective(p, 0.8, 0.2) == pytest.approx(0.8 * 0.25 + 0.2 * 0.5)
    assert sa_objective(p, 1.0, 0.0) == 0.25
    for bad in ((0, 0), (-1, 2), (1, -0.5)):
        with pytest.raises(ValueError):
            sa_objective(p, *bad)


def test_proxy_point_consistent_with_features():
    nl = bp_multi_like(1, n_logic=80, n_nets=200)
    p = random_partition(nl, 4)
    pp = proxy_point(nl, p)
    f = proxy_features(nl, p)
    assert pp.cut_size == cut_size(nl, p)
    assert pp.cut_fraction == f[0]
    assert pp.area_imbalance == f[1]
    assert pp.macros_tier0 + pp.macros_tier1 == nl.num_macros
    assert pp.area_tier0 + pp.area_tier1 == pytest.approx(float(nl.macro_areas.sum()))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=120, deadline=None)
def test_features_match_oracle(seed):
    rng = np.random.default_rng(seed)
    nl = oracles.random_netlist(rng)
    assign = oracles.random_assignment(rng, nl)
    got = feature_vector(nl, Partition.from_mapping(nl, assign))
    want = np.array(oracles.feature_vector(nl, assign))
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_feature_bounds(seed):
    rng = np.random.default_rng(seed)
    nl = oracles.random_netlist(rng)
    f = feature_vector(nl, Partition.from_mapping(nl, oracles.random_assignment(rng, nl)))
    assert np.all((f[:3] >= 0) & (f[:3] <= 1))
    assert np.all((f[7:] >= 0) & (f[7:] <= 1))
    assert f[6] >= 0
    if f[0] > 0:
        assert 2 <= f[3] <= f[5] <= f[4]


def test_feature_matrix_matches_rows_and_chunks():
    nl = bp_multi_like(0, n_logic=100, n_nets=300)
    parts = [random_partition(nl, s) for s in range(70)]
    X = feature_matrix(nl, parts, chunk=16)
    assert X.shape == (70, 7 + len(nl.clusters))
    # reductions over differently shaped chunks may differ in the last ulp
    for i in (0, 15, 16, 69):
        np.testing.assert_allclose(X[i], feature_vector(nl, parts[i]), rtol=1e-12)
    np.testing.assert_array_equal(feature_matrix(nl, parts, chunk=16), X)
    T = np.array([p.tiers for p in parts])
    np.testing.assert_array_equal(feature_matrix(nl, T), X)


def test_feature_matrix_rejects_bad_shape():
    nl = cluster_netlist()
    with pytest.raises(ValueError):
        feature_matrix(nl, np.zeros((2, 3), dtype=int))
    with pytest.raises(ValueError):
        proxy_features(nl, [0, 1])


def test_featurizer_estimator():
    nl = bp_multi_like(0, n_logic=50, n_nets=120)
    parts = [random_partition(nl, s) for s in range(5)]
    fz = PartitionFeaturizer(nl).fit()
    np.testing.assert_array_equal(fz.transform(parts), feature_matrix(nl, parts))
    assert len(fz.get_feature_names_out()) == fz.n_features_out_ == 7 + len(nl.clusters)
    with pytest.raises(ValueError):
        PartitionFeaturizer().fit()
