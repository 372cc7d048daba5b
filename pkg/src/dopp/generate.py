"""Seeded synthetic netlists shaped like memory-on-logic benchmark designs."""
from __future__ import annotations

import numpy as np

from .netlist import Cell, Net, Netlist

__all__ = ["generate_netlist", "bp_multi_like"]


def _round_sig(x: float, digits: int = 6) -> float:
    return float(f"{x:.{digits}g}")


def generate_netlist(
    n_macros: int,
    n_clusters: int,
    n_logic: int,
    n_nets: int,
    seed: int = 0,
    macro_net_fraction: float = 0.3,
    mean_extra_pins: float = 1.5,
    max_degree: int = 16,
    name: str = "synthetic",
) -> Netlist:
    """Build a random clustered netlist with exactly the requested counts.

    Every cluster receives at least one macro when ``n_macros >= n_clusters``.
    Nets are mostly cluster-local; a ``macro_net_fraction`` share of them
    includes one macro (occasionally one from a foreign cluster).  Areas are
    rounded to 6 significant digits so the text round-trip is exact.
    """
    if n_macros < 1:
        raise ValueError("need at least one macro")
    if n_logic + n_macros < 2 and n_nets > 0:
        raise ValueError("need at least two cells to form a net")
    rng = np.random.default_rng(seed)
    labels = [f"h{k:02d}" for k in range(n_clusters)]

    macro_cluster = np.concatenate(
        [np.arange(min(n_macros, n_clusters)), rng.integers(0, n_clusters, max(0, n_macros - n_clusters))]
    )
    macro_area = rng.lognormal(mean=4.0, sigma=0.6, size=n_macros)
    logic_cluster = rng.integers(0, n_clusters, n_logic)
    logic_area = rng.uniform(0.5, 3.0, n_logic)

    cells = [
        Cell(f"m{i}", _round_sig(macro_area[i]), "macro", labels[macro_cluster[i]]) for i in range(n_macros)
    ]
    cells += [Cell(f"l{i}", _round_sig(logic_area[i], 4), "logic", labels[logic_cluster[i]]) for i in range(n_logic)]

    logic_by_cluster = [np.flatnonzero(logic_cluster == k) for k in range(n_clusters)]
    macro_by_cluster = [np.flatnonzero(macro_cluster == k) for k in range(n_clusters)]
    net_cluster = rng.integers(0, n_clusters, n_nets)
    has_macro = rng.random(n_nets) < macro_net_fraction
    foreign = rng.random(n_nets) < 0.1
    degrees = np.minimum(2 + rng.poisson(mean_extra_pins, n_nets), max_degree)

    nets = []
    for e in range(n_nets):
        k = net_cluster[e]
        pins: list[str] = []
        if has_macro[e]:
            pool = macro_by_cluster[k] if (len(macro_by_cluster[k]) and not foreign[e]) else np.arange(n_macros)
            pins.append(f"m{pool[rng.integers(len(pool))]}")
        want = int(degrees[e]) - len(pins)
        local = logic_by_cluster[k] if len(logic_by_cluster[k]) >= want else np.arange(n_logic)
        if len(local) >= want > 0:
            pins += [f"l{j}" for j in rng.choice(local, size=want, replace=False)]
        elif want > 0:
            # not enough logic to fill the net; fall back to macros
            extra = [f"m{j}" for j in rng.permutation(n_macros) if f"m{j}" not in pins]
            pins += [f"l{j}" for j in local] + extra[: max(0, want - len(local))]
        nets.append(Net(f"n{e}", tuple(pins)))
    return Netlist(name, tuple(cells), tuple(nets))


def bp_multi_like(seed: int = 0, n_logic: int = 600, n_nets: int = 1500) -> Netlist:
    """26 macros in 18 hierarchy clusters, giving a 25-dimensional feature map.

    The full-scale counts (179k nets / 152k cells) are available through
    :func:`generate_netlist`; the defaults here keep annealing runs fast.
    """
    return generate_netlist(26, 18, n_logic, n_nets, seed=seed, name="bp_multi_like")
