"""Proxy objectives and the surrogate feature map.

Feature layout for a netlist with clusters ``h_1 < h_2 < ...`` (lexicographic)::

    [F1 cut fraction, F2 area imbalance, F3 macro-count imbalance,
     F4 min, F5 max, F6 mean, F7 population std of cut-net degree,
     coh(h_1), coh(h_2), ...]
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .netlist import Netlist, Partition

__all__ = [
    "ProxyPoint",
    "PROXY_FEATURE_NAMES",
    "cut_mask",
    "cut_size",
    "proxy_point",
    "area_imbalance",
    "proxy_features",
    "cohesion",
    "feature_names",
    "feature_vector",
    "feature_matrix",
    "sa_objective",
    "PartitionFeaturizer",
]

PROXY_FEATURE_NAMES = (
    "cut_fraction",
    "area_imbalance",
    "count_imbalance",
    "cut_degree_min",
    "cut_degree_max",
    "cut_degree_mean",
    "cut_degree_std",
)


@dataclass(frozen=True)
class ProxyPoint:
    cut_size: int
    num_nets: int
    area_imbalance: float
    area_tier0: float
    area_tier1: float
    macros_tier0: int
    macros_tier1: int

    @property
    def cut_fraction(self) -> float:
        return self.cut_size / self.num_nets if self.num_nets else 0.0


def _tiers(netlist: Netlist, partition) -> np.ndarray:
    if isinstance(partition, Partition):
        if partition.macro_ids != netlist.macro_ids:
            raise ValueError("partition does not cover this netlist's macros")
        return partition.as_array().astype(np.int64)
    tiers = np.asarray(partition, dtype=np.int64)
    if tiers.shape != (netlist.num_macros,):
        raise ValueError(f"expected {netlist.num_macros} tiers, got shape {tiers.shape}")
    return tiers


def cut_mask(netlist: Netlist, partition) -> np.ndarray:
    """Boolean per-net mask; a net is cut when its pins touch both tiers."""
    tiers = _tiers(netlist, partition)
    upper = netlist.incidence @ tiers
    return (upper > 0) & (upper < netlist.net_degrees)


def cut_size(netlist: Netlist, partition) -> int:
    return int(cut_mask(netlist, partition).sum())


def proxy_point(netlist: Netlist, partition) -> ProxyPoint:
    tiers = _tiers(netlist, partition)
    areas = netlist.macro_areas
    total = float(areas.sum())
    a1 = float(np.dot(areas, tiers))
    m1 = int(tiers.sum())
    return ProxyPoint(
        cut_size(netlist, tiers),
        netlist.num_nets,
        area_imbalance(total, a1),
        total - a1,
        a1,
        netlist.num_macros - m1,
        m1,
    )


def area_imbalance(total_area: float, upper_area: float) -> float:
    """``|A1 - A2| / (A1 + A2)`` written in terms of the total and upper-tier area."""
    return abs(total_area - 2.0 * upper_area) / total_area if total_area > 0 else 0.0


def proxy_features(netlist: Netlist, partition) -> np.ndarray:
    """F1..F7 for one partition.  With no cut nets the degree statistics are 0."""
    tiers = _tiers(netlist, partition)
    mask = cut_mask(netlist, tiers)
    p = proxy_point(netlist, tiers)
    f3 = abs(p.macros_tier0 - p.macros_tier1) / (p.macros_tier0 + p.macros_tier1)
    deg = netlist.net_degrees[mask].astype(float)
    if deg.size:
        stats = [deg.min(), deg.max(), deg.mean(), deg.std()]
    else:
        stats = [0.0, 0.0, 0.0, 0.0]
    return np.array([p.cut_fraction, p.area_imbalance, f3, *stats], dtype=float)


def _cluster_counts(netlist: Netlist, tiers: np.ndarray, k: int):
    in_h = netlist.macro_cluster == k
    s = int(netlist.cluster_logic_counts[k])
    m_total = int(in_h.sum())
    m_lower = int((in_h & (tiers == 0)).sum())
    return s, m_lower, m_total


def _coh_ratio(s: int, m_lower: int, m_total: int) -> tuple[int, int]:
    num = s * m_lower + m_lower * (m_lower - 1) // 2
    den = s * m_total + m_total * (m_total - 1) // 2
    return num, den


def cohesion(netlist: Netlist, partition, cluster: str, exact: bool = False):
    """Lower-tier cohesion of one hierarchy cluster.

    Returns 1 when the pair count in the denominator is zero (no macros, or a
    lone macro with no logic): such a cluster cannot be split across tiers.
    ``exact=True`` returns a :class:`fractions.Fraction`.
    """
    try:
        k = netlist.clusters.index(cluster)
    except ValueError:
        raise KeyError(f"unknown cluster {cluster!r}") from None
    num, den = _coh_ratio(*_cluster_counts(netlist, _tiers(netlist, partition), k))
    if den == 0:
        return Fraction(1) if exact else 1.0
    return Fraction(num, den) if exact else num / den


def feature_names(netlist: Netlist) -> list[str]:
    return list(PROXY_FEATURE_NAMES) + [f"coh[{h}]" for h in netlist.clusters]


def feature_vector(netlist: Netlist, partition) -> np.ndarray:
    return feature_matrix(netlist, [partition])[0]


def feature_matrix(netlist: Netlist, partitions, chunk: int = 64) -> np.ndarray:
    """Featurize many partitions at once; rows follow the input order.

    ``partitions`` is a sequence of :class:`Partition` or an (n, num_macros)
    0/1 array.
    """
    if isinstance(partitions, np.ndarray):
        T = np.asarray(partitions, dtype=np.int64)
    else:
        T = np.array([_tiers(netlist, p) for p in partitions], dtype=np.int64).reshape(-1, netlist.num_macros)
    if T.ndim != 2 or T.shape[1] != netlist.num_macros:
        raise ValueError(f"expected shape (n, {netlist.num_macros}), got {T.shape}")
    n = T.shape[0]
    H = len(netlist.clusters)
    out = np.empty((n, 7 + H))
    if n == 0:
        return out

    deg = netlist.net_degrees.astype(float)[:, None]
    for lo in range(0, n, chunk):
        Tc = T[lo : lo + chunk]
        upper = np.asarray(netlist.incidence @ Tc.T)
        cut = (upper > 0) & (upper < deg)
        cs = cut.sum(axis=0)
        safe = np.maximum(cs, 1)
        dmin = np.where(cs > 0, np.where(cut, deg, np.inf).min(axis=0), 0.0)
        dmax = np.where(cs > 0, np.where(cut, deg, -np.inf).max(axis=0), 0.0)
        mean = np.where(cut, deg, 0.0).sum(axis=0) / safe
        var = np.where(cut, (deg - mean) ** 2, 0.0).sum(axis=0) / safe
        out[lo : lo + chunk, 0] = cs / max(netlist.num_nets, 1)
        out[lo : lo + chunk, 3] = dmin
        out[lo : lo + chunk, 4] = dmax
        out[lo : lo + chunk, 5] = np.where(cs > 0, mean, 0.0)
        out[lo : lo + chunk, 6] = np.where(cs > 0, np.sqrt(var), 0.0)

    areas = netlist.macro_areas
    total = float(areas.sum())
    out[:, 1] = [area_imbalance(total, float(np.dot(areas, t))) for t in T]
    m1 = T.sum(axis=1)
    m0 = netlist.num_macros - m1
    out[:, 2] = np.abs(m0 - m1) / (m0 + m1)

    onehot = np.zeros((netlist.num_macros, H), dtype=np.int64)
    onehot[np.arange(netlist.num_macros), netlist.macro_cluster] = 1
    m_lower = (1 - T) @ onehot
    m_total = onehot.sum(axis=0)
    s = netlist.cluster_logic_counts
    num = s * m_lower + m_lower * (m_lower - 1) // 2
    den = s * m_total + m_total * (m_total - 1) // 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:, 7:] = np.where(den > 0, num / np.where(den > 0, den, 1), 1.0)
    return out


def sa_objective(proxy: ProxyPoint, w_cut: float, w_bal: float) -> float:
    """Scalar annealing cost ``w_cut * F1 + w_bal * F2``."""
    if w_cut < 0 or w_bal < 0 or w_cut + w_bal <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return w_cut * proxy.cut_fraction + w_bal * proxy.area_imbalance


class PartitionFeaturizer(TransformerMixin, BaseEstimator):
    """Map partitions (or an (n, num_macros) tier matrix) to feature rows.

    Parameters
    ----------
    netlist : Netlist
        Design the partitions belong to; fixes the feature dimension.
    """

    def __init__(self, netlist: Netlist | None = None):
        self.netlist = netlist

    def fit(self, X=None, y=None):
        if self.netlist is None:
            raise ValueError("PartitionFeaturizer needs a netlist")
        self.feature_names_out_ = np.array(feature_names(self.netlist), dtype=object)
        self.n_features_out_ = len(self.feature_names_out_)
        return self

    def transform(self, X: Sequence[Partition] | np.ndarray) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "feature_names_out_")
        return feature_matrix(self.netlist, X)

    def get_feature_names_out(self, input_features=None):
        return self.feature_names_out_
