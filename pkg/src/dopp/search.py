"""Single-flip simulated annealing feeding a grid-based proxy archive.

The annealer minimises ``w_cut * F1 + w_bal * F2`` with Metropolis acceptance
and geometric cooling.  A warmup prefix of the run only records proxy values to
fix the grid bounds; afterwards every proposed (or only every accepted) state
is offered to a :class:`GridArchive` over ``(log1p(cut_size),
log1p(area_imbalance))``.  The archive contents form the candidate set.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from sklearn.base import BaseEstimator

from .netlist import Netlist, Partition, random_partition
from .proxy import ProxyPoint, area_imbalance, feature_matrix

__all__ = ["SAConfig", "Candidate", "GridArchive", "grid_key", "anneal", "SimulatedAnnealingSearch"]


@dataclass(frozen=True)
class SAConfig:
    iterations: int = 20_000
    initial_temperature: float = 0.05
    cooling_rate: float = 0.9997
    w_cut: float = 0.8
    w_bal: float = 0.2
    warmup_fraction: float = 0.1
    grid_resolution: int = 26
    seed: int = 0
    offer: str = "proposed"  # or "accepted"

    def __post_init__(self):
        if self.initial_temperature <= 0:
            raise ValueError("initial_temperature must be > 0")
        if not 0 < self.cooling_rate < 1:
            raise ValueError("cooling_rate must lie in (0, 1)")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.w_cut < 0 or self.w_bal < 0 or self.w_cut + self.w_bal <= 0:
            raise ValueError("proxy weights must be non-negative with a positive sum")
        if self.grid_resolution < 1:
            raise ValueError("grid_resolution must be >= 1")
        if self.offer not in ("proposed", "accepted"):
            raise ValueError("offer must be 'proposed' or 'accepted'")
        if self.iterations < self.warmup_iterations:
            raise ValueError("iterations must cover the warmup")

    @property
    def warmup_iterations(self) -> int:
        return max(1, int(self.warmup_fraction * self.iterations))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    uid: int
    partition: Partition
    proxy: ProxyPoint
    features: np.ndarray | None = field(default=None, repr=False)


def grid_key(cut: float, imbalance: float, bounds, resolution: int) -> tuple[int, int]:
    """Cell index of a proxy point; out-of-range values clamp to the edge bins.

    ``bounds`` is ``((lo_cut, hi_cut), (lo_imb, hi_imb))`` in log1p space.
    """
    out = []
    for value, (lo, hi) in zip((cut, imbalance), bounds):
        v = math.log1p(value)
        u = (v - lo) / (hi - lo) if hi > lo else 0.0
        u = min(max(u, 0.0), 1.0)
        out.append(min(int(math.floor(resolution * u)), resolution - 1))
    return out[0], out[1]


class GridArchive:
    """At most one candidate per grid cell, replaced on weak dominance.

    A newcomer replaces the stored candidate when it is no worse in both
    cut size and area imbalance; among exact ties the newest wins.  Offering
    the partition already stored in the cell is a no-op.
    """

    def __init__(self, resolution: int, bounds):
        self.resolution = resolution
        self.bounds = tuple(tuple(map(float, b)) for b in bounds)
        self.cells: dict[tuple[int, int], Candidate] = {}

    def key(self, proxy: ProxyPoint) -> tuple[int, int]:
        return grid_key(proxy.cut_size, proxy.area_imbalance, self.bounds, self.resolution)

    def _admits(self, cell, cut: int, imbalance: float, pkey: str | None) -> bool:
        stored = self.cells.get(cell)
        if stored is None:
            return True
        if cut <= stored.proxy.cut_size and imbalance <= stored.proxy.area_imbalance:
            return pkey is None or stored.partition.key() != pkey
        return False

    def insert(self, candidate: Candidate) -> bool:
        cell = self.key(candidate.proxy)
        if not self._admits(cell, candidate.proxy.cut_size, candidate.proxy.area_imbalance, candidate.partition.key()):
            return False
        self.cells[cell] = candidate
        return True

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(sorted(self.cells.values(), key=lambda c: c.uid))


def _upper_area(areas: np.ndarray, tiers: np.ndarray) -> float:
    return float(np.dot(areas, tiers))


def anneal(netlist: Netlist, config: SAConfig | None = None, return_archive: bool = False):
    """Run the annealer and return the archived candidates ordered by uid.

    Uids are renumbered ``0..N-1`` in insertion order and each candidate
    carries its feature vector.  Identical ``(netlist, config)`` pairs give
    identical output.
    """
    cfg = config or SAConfig()
    M = netlist.num_macros
    n_nets = max(netlist.num_nets, 1)
    areas = netlist.macro_areas
    total_area = float(areas.sum())
    deg = netlist.net_degrees
    macro_nets = netlist.macro_nets

    tiers = random_partition(netlist, cfg.seed).as_array().astype(np.int64)
    upper = np.asarray(netlist.incidence @ tiers).astype(np.int64)
    cut = int(((upper > 0) & (upper < deg)).sum())
    a_up = _upper_area(areas, tiers)

    imb = area_imbalance(total_area, a_up)
    obj = cfg.w_cut * cut / n_nets + cfg.w_bal * imb

    rng = np.random.default_rng([cfg.seed, 0x5A])
    moves = rng.integers(0, M, size=cfg.iterations)
    draws = rng.random(cfg.iterations)
    warm = cfg.warmup_iterations
    obs_cut = [math.log1p(cut)]
    obs_imb = [math.log1p(imb)]

    archive: GridArchive | None = None
    next_uid = 0

    def offer(c: int, im: float, t: np.ndarray, a1: float) -> None:
        nonlocal next_uid
        cell = grid_key(c, im, archive.bounds, archive.resolution)
        part = Partition(netlist.macro_ids, tuple(int(x) for x in t))
        if not archive._admits(cell, c, im, part.key()):
            return
        m1 = int(t.sum())
        proxy = ProxyPoint(c, netlist.num_nets, im, total_area - a1, a1, M - m1, m1)
        archive.cells[cell] = Candidate(next_uid, part, proxy)
        next_uid += 1

    temperature = cfg.initial_temperature
    for step in range(cfg.iterations):
        if step == warm:
            bounds = ((min(obs_cut), max(obs_cut)), (min(obs_imb), max(obs_imb)))
            archive = GridArchive(cfg.grid_resolution, bounds)
            offer(cut, imb, tiers, a_up)

        m = moves[step]
        sign = 1 - 2 * int(tiers[m])
        nets = macro_nets[m]
        old = upper[nets]
        new = old + sign
        d = deg[nets]
        cut_p = cut + int(((new > 0) & (new < d)).sum()) - int(((old > 0) & (old < d)).sum())
        tiers[m] ^= 1
        a_p = _upper_area(areas, tiers)
        imb_p = area_imbalance(total_area, a_p)
        obj_p = cfg.w_cut * cut_p / n_nets + cfg.w_bal * imb_p
        delta = obj_p - obj
        accept = delta <= 0 or (temperature > 0 and draws[step] < math.exp(-delta / temperature))

        if step < warm:
            obs_cut.append(math.log1p(cut_p))
            obs_imb.append(math.log1p(imb_p))
        elif cfg.offer == "proposed":
            offer(cut_p, imb_p, tiers, a_p)

        if accept:
            upper[nets] = new
            cut, imb, a_up, obj = cut_p, imb_p, a_p, obj_p
            if step >= warm and cfg.offer == "accepted":
                offer(cut, imb, tiers, a_up)
        else:
            tiers[m] ^= 1
        temperature *= cfg.cooling_rate

    if archive is None:  # unreachable given SAConfig validation
        raise RuntimeError("annealing ended before warmup finished")

    ordered = list(archive)
    feats = feature_matrix(netlist, np.array([c.partition.tiers for c in ordered], dtype=np.int64).reshape(-1, M))
    candidates = [Candidate(i, c.partition, c.proxy, feats[i]) for i, c in enumerate(ordered)]
    if return_archive:
        return candidates, archive
    return candidates


class SimulatedAnnealingSearch(BaseEstimator):
    """Estimator wrapper around :func:`anneal`.

    ``fit(netlist)`` populates ``candidates_``, ``archive_`` and
    ``features_`` (the (N, d) feature matrix).
    """

    def __init__(
        self,
        iterations=20_000,
        initial_temperature=0.05,
        cooling_rate=0.9997,
        w_cut=0.8,
        w_bal=0.2,
        warmup_fraction=0.1,
        grid_resolution=26,
        seed=0,
        offer="proposed",
    ):
        self.iterations = iterations
        self.initial_temperature = initial_temperature
        self.cooling_rate = cooling_rate
        self.w_cut = w_cut
        self.w_bal = w_bal
        self.warmup_fraction = warmup_fraction
        self.grid_resolution = grid_resolution
        self.seed = seed
        self.offer = offer

    def fit(self, netlist: Netlist, y=None):
        cfg = SAConfig(**self.get_params())
        self.candidates_, self.archive_ = anneal(netlist, cfg, return_archive=True)
        self.features_ = np.array([c.features for c in self.candidates_])
        return self
