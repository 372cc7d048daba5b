"""Hypergraph netlist model, the ``.nl`` text format, and tier partitions.

Only macros carry a tier; logic cells are pinned to tier 0 (bottom) and never
appear in a :class:`Partition`.

File format::

    # comment
    design <name>
    cell <id> <area> <logic|macro> <cluster>
    net <id> <pin> <pin> [<pin> ...]

The ``design`` header comes first; ``cell`` and ``net`` lines may appear in any
order.  Areas are written with 12 significant digits.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Cell",
    "Net",
    "Netlist",
    "Partition",
    "NetlistError",
    "NetlistSyntaxError",
    "DanglingPinError",
    "DuplicateIdError",
    "DegenerateNetError",
    "NetlistValidationError",
    "UnknownMacroError",
    "parse_netlist",
    "read_netlist",
    "serialize_netlist",
    "write_netlist",
    "random_partition",
    "flip_macro",
    "ROOT_CLUSTER",
]

ROOT_CLUSTER = "_root"
CELL_KINDS = ("logic", "macro")
_TOKEN = re.compile(r"\S+")


class NetlistError(ValueError):
    """Base class for netlist problems; ``code`` is a stable machine-readable tag."""

    code = "netlist-error"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


class NetlistSyntaxError(NetlistError):
    code = "syntax"


class DanglingPinError(NetlistError):
    code = "dangling-pin"

    def __init__(self, net_id: str, pin: str, line=None, column=None):
        self.net_id = net_id
        self.pin = pin
        super().__init__(f"net {net_id!r} references unknown cell {pin!r}", line, column)


class DuplicateIdError(NetlistError):
    code = "duplicate-id"

    def __init__(self, kind: str, ident: str, line=None, column=None):
        self.kind = kind
        self.ident = ident
        super().__init__(f"duplicate {kind} id {ident!r}", line, column)


class DegenerateNetError(NetlistError):
    code = "degenerate-net"

    def __init__(self, net_id: str, n_pins: int, line=None, column=None):
        self.net_id = net_id
        self.n_pins = n_pins
        super().__init__(f"net {net_id!r} has {n_pins} pin(s); at least 2 required", line, column)


class NetlistValidationError(NetlistError):
    code = "invalid"


class UnknownMacroError(KeyError):
    def __init__(self, macro_id: str):
        self.macro_id = macro_id
        super().__init__(macro_id)


@dataclass(frozen=True)
class Cell:
    id: str
    area: float
    kind: str
    cluster: str = ROOT_CLUSTER

    @property
    def is_macro(self) -> bool:
        return self.kind == "macro"


@dataclass(frozen=True)
class Net:
    id: str
    pins: tuple[str, ...]


@dataclass(frozen=True, eq=True)
class Netlist:
    """Immutable design under study.

    Construction validates every structural invariant, so any ``Netlist``
    instance in circulation is well formed.  Index structures used by the
    metric code are derived lazily and cached.
    """

    name: str
    cells: tuple[Cell, ...]
    nets: tuple[Net, ...]

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "nets", tuple(Net(n.id, tuple(n.pins)) for n in self.nets))
        _validate(self)

    # -- index structures -------------------------------------------------
    @cached_property
    def cell_index(self) -> dict[str, int]:
        return {c.id: i for i, c in enumerate(self.cells)}

    @cached_property
    def macro_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.cells if c.is_macro)

    @cached_property
    def macro_index(self) -> dict[str, int]:
        return {m: i for i, m in enumerate(self.macro_ids)}

    @cached_property
    def clusters(self) -> tuple[str, ...]:
        """Cluster labels in lexicographic order (the feature layout order)."""
        return tuple(sorted({c.cluster for c in self.cells}))

    @cached_property
    def macro_areas(self) -> np.ndarray:
        return _frozen(np.array([c.area for c in self.cells if c.is_macro], dtype=float))

    @cached_property
    def macro_cluster(self) -> np.ndarray:
        pos = {h: i for i, h in enumerate(self.clusters)}
        return _frozen(np.array([pos[c.cluster] for c in self.cells if c.is_macro], dtype=np.intp))

    @cached_property
    def cluster_logic_counts(self) -> np.ndarray:
        """S_h: number of logic cells per cluster."""
        pos = {h: i for i, h in enumerate(self.clusters)}
        counts = np.zeros(len(self.clusters), dtype=np.int64)
        for c in self.cells:
            if not c.is_macro:
                counts[pos[c.cluster]] += 1
        return _frozen(counts)

    @cached_property
    def net_degrees(self) -> np.ndarray:
        return _frozen(np.array([len(n.pins) for n in self.nets], dtype=np.int64))

    @cached_property
    def net_logic_pins(self) -> np.ndarray:
        """Per net, the number of pins on logic cells (always tier 0)."""
        kinds = {c.id: c.is_macro for c in self.cells}
        return _frozen(np.array([sum(not kinds[p] for p in n.pins) for n in self.nets], dtype=np.int64))

    @cached_property
    def net_macro_pins(self) -> tuple[np.ndarray, ...]:
        """Per net, the macro indices among its pins."""
        midx = self.macro_index
        return tuple(
            _frozen(np.array([midx[p] for p in n.pins if p in midx], dtype=np.intp)) for n in self.nets
        )

    @cached_property
    def macro_nets(self) -> tuple[np.ndarray, ...]:
        """Per macro, the indices of its incident nets."""
        incident: list[list[int]] = [[] for _ in self.macro_ids]
        for e, pins in enumerate(self.net_macro_pins):
            for m in pins:
                incident[m].append(e)
        return tuple(_frozen(np.array(x, dtype=np.intp)) for x in incident)

    @cached_property
    def incidence(self):
        """Sparse (num_nets x num_macros) 0/1 incidence matrix."""
        from scipy import sparse

        rows = np.concatenate([np.full(len(p), e, dtype=np.intp) for e, p in enumerate(self.net_macro_pins)] or [np.empty(0, np.intp)])
        cols = np.concatenate(self.net_macro_pins or (np.empty(0, np.intp),))
        data = np.ones(len(rows), dtype=np.int64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(len(self.nets), len(self.macro_ids)))

    @property
    def num_nets(self) -> int:
        return len(self.nets)

    @property
    def num_macros(self) -> int:
        return len(self.macro_ids)

    def digest(self) -> str:
        return hashlib.sha256(serialize_netlist(self).encode("utf-8")).hexdigest()

    # cached_property entries live in __dict__; keep them out of equality/pickling
    def __getstate__(self):
        return {"name": self.name, "cells": self.cells, "nets": self.nets}

    def __setstate__(self, state):
        for k, v in state.items():
            object.__setattr__(self, k, v)

    def __hash__(self):
        return hash((self.name, self.cells, self.nets))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _validate(nl: Netlist, lines: Mapping[str, tuple[int, int]] | None = None) -> None:
    lines = lines or {}
    seen: set[str] = set()
    n_macros = 0
    for c in nl.cells:
        loc = lines.get("cell:" + c.id, (None, None))
        if c.id in seen:
            raise DuplicateIdError("cell", c.id, *lines.get("dup:cell:" + c.id, loc))
        seen.add(c.id)
        if c.kind not in CELL_KINDS:
            raise NetlistValidationError(f"cell {c.id!r} has unknown kind {c.kind!r}", *loc)
        if not (math.isfinite(c.area) and c.area > 0):
            raise NetlistValidationError(f"cell {c.id!r} must have positive finite area, got {c.area!r}", *loc)
        n_macros += c.is_macro
    net_seen: set[str] = set()
    for n in nl.nets:
        loc = lines.get("net:" + n.id, (None, None))
        if n.id in net_seen:
            raise DuplicateIdError("net", n.id, *lines.get("dup:net:" + n.id, loc))
        net_seen.add(n.id)
        if len(n.pins) < 2:
            raise DegenerateNetError(n.id, len(n.pins), *loc)
        if len(set(n.pins)) != len(n.pins):
            dup = next(p for i, p in enumerate(n.pins) if p in n.pins[:i])
            raise DuplicateIdError("pin", dup, *loc)
        for p in n.pins:
            if p not in seen:
                raise DanglingPinError(n.id, p, *lines.get(f"pin:{n.id}:{p}", loc))
    if n_macros == 0:
        raise NetlistValidationError("netlist has no macros; partitioning is vacuous")


def parse_netlist(text: str) -> Netlist:
    """Parse a ``.nl`` document into a validated :class:`Netlist`."""
    name = None
    cells: list[Cell] = []
    nets: list[Net] = []
    where: dict[str, tuple[int, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(line)]
        if not toks:
            continue
        head, col = toks[0]
        if name is None and head != "design":
            raise NetlistSyntaxError("expected 'design <name>' header first", lineno, col)
        if head == "design":
            if name is not None:
                raise NetlistSyntaxError("duplicate 'design' header", lineno, col)
            if len(toks) != 2:
                raise NetlistSyntaxError("'design' takes exactly one name", lineno, col)
            name = toks[1][0]
        elif head == "cell":
            if len(toks) != 5:
                raise NetlistSyntaxError(
                    f"'cell' expects 4 fields (id area kind cluster), got {len(toks) - 1}", lineno, col
                )
            (cid, _), (area_s, acol), (kind, kcol), (cluster, _) = toks[1:]
            try:
                area = float(area_s)
            except ValueError:
                raise NetlistSyntaxError(f"bad area {area_s!r}", lineno, acol) from None
            if kind not in CELL_KINDS:
                raise NetlistSyntaxError(f"cell kind must be logic or macro, got {kind!r}", lineno, kcol)
            # a redeclaration is reported where it happens, not at the original
            where["dup:cell:" + cid if "cell:" + cid in where else "cell:" + cid] = (lineno, toks[1][1])
            cells.append(Cell(cid, area, kind, cluster))
        elif head == "net":
            if len(toks) < 2:
                raise NetlistSyntaxError("'net' needs an id", lineno, col)
            nid = toks[1][0]
            where["dup:net:" + nid if "net:" + nid in where else "net:" + nid] = (lineno, toks[1][1])
            for p, pcol in toks[2:]:
                where.setdefault(f"pin:{nid}:{p}", (lineno, pcol))
            nets.append(Net(nid, tuple(p for p, _ in toks[2:])))
        else:
            raise NetlistSyntaxError(f"unknown record type {head!r}", lineno, col)
    if name is None:
        raise NetlistSyntaxError("empty document: missing 'design' header", 1, 1)
    nl = object.__new__(Netlist)
    object.__setattr__(nl, "name", name)
    object.__setattr__(nl, "cells", tuple(cells))
    object.__setattr__(nl, "nets", tuple(nets))
    _validate(nl, where)
    return nl


def read_netlist(path) -> Netlist:
    with open(path, encoding="utf-8") as fh:
        return parse_netlist(fh.read())


def serialize_netlist(nl: Netlist) -> str:
    out = [f"design {nl.name}"]
    out.extend(f"cell {c.id} {c.area:.12g} {c.kind} {c.cluster}" for c in nl.cells)
    out.extend(f"net {n.id} {' '.join(n.pins)}" for n in nl.nets)
    return "\n".join(out) + "\n"


def write_netlist(nl: Netlist, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_netlist(nl))


@dataclass(frozen=True)
class Partition:
    """Tier assignment for every macro, stored in netlist macro order."""

    macro_ids: tuple[str, ...]
    tiers: tuple[int, ...]

    def __post_init__(self):
        if len(self.macro_ids) != len(self.tiers):
            raise ValueError("macro_ids and tiers differ in length")
        if any(t not in (0, 1) for t in self.tiers):
            raise ValueError("tiers must be 0 or 1")

    @classmethod
    def from_mapping(cls, netlist: Netlist, assignment: Mapping[str, int]) -> "Partition":
        if set(assignment) != set(netlist.macro_ids):
            missing = set(netlist.macro_ids) - set(assignment)
            extra = set(assignment) - set(netlist.macro_ids)
            raise ValueError(f"assignment domain mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        return cls(netlist.macro_ids, tuple(int(assignment[m]) for m in netlist.macro_ids))

    @classmethod
    def from_array(cls, netlist: Netlist, tiers: Iterable[int]) -> "Partition":
        return cls(netlist.macro_ids, tuple(int(t) for t in tiers))

    @property
    def assignment(self) -> dict[str, int]:
        return dict(zip(self.macro_ids, self.tiers))

    def __getitem__(self, macro_id: str) -> int:
        try:
            return self.tiers[self.macro_ids.index(macro_id)]
        except ValueError:
            raise UnknownMacroError(macro_id) from None

    def as_array(self) -> np.ndarray:
        return np.array(self.tiers, dtype=np.int8)

    def key(self) -> str:
        """Compact tier string, e.g. ``'0110'``; identical partitions share a key."""
        return "".join("1" if t else "0" for t in self.tiers)

    def digest(self) -> str:
        return hashlib.sha256(self.key().encode("ascii")).hexdigest()


def random_partition(netlist: Netlist, seed: int) -> Partition:
    rng = np.random.default_rng(seed)
    return Partition.from_array(netlist, rng.integers(0, 2, size=netlist.num_macros))


def flip_macro(partition: Partition, macro_id: str) -> Partition:
    try:
        i = partition.macro_ids.index(macro_id)
    except ValueError:
        raise UnknownMacroError(macro_id) from None
    tiers = list(partition.tiers)
    tiers[i] ^= 1
    return Partition(partition.macro_ids, tuple(tiers))
