"""Budgeted selection of memory-on-logic 3D-IC tier partitions."""
from .design import CoresetSelection, DesignWeights, DOptimalDesign, equivalence_gap, extract_coreset, solve_doptimal
from .generate import bp_multi_like, generate_netlist
from .netlist import (
    Cell,
    Net,
    Netlist,
    NetlistError,
    Partition,
    flip_macro,
    parse_netlist,
    random_partition,
    read_netlist,
    serialize_netlist,
    write_netlist,
)
from .pipeline import PipelineConfig, RunReport, budget_sweep, multi_seed, report, run_dopp, select_final
from .ppa import MetricSchema, PpaRecord, SyntheticOracle, ExternalCommand, composite_cost, normalize_metrics
from .proxy import PartitionFeaturizer, cohesion, cut_size, feature_matrix, feature_vector, proxy_features, sa_objective
from .search import Candidate, GridArchive, SAConfig, SimulatedAnnealingSearch, anneal
from .surrogate import LocalSurrogate, fit_wls, rank_candidates, rank_diagnostics, verification_set

__version__ = "0.1.0"

__all__ = [
    "Cell",
    "Net",
    "Netlist",
    "NetlistError",
    "Partition",
    "parse_netlist",
    "read_netlist",
    "serialize_netlist",
    "write_netlist",
    "random_partition",
    "flip_macro",
    "generate_netlist",
    "bp_multi_like",
    "cut_size",
    "proxy_features",
    "cohesion",
    "feature_vector",
    "feature_matrix",
    "sa_objective",
    "PartitionFeaturizer",
    "SAConfig",
    "Candidate",
    "GridArchive",
    "anneal",
    "SimulatedAnnealingSearch",
    "MetricSchema",
    "PpaRecord",
    "SyntheticOracle",
    "ExternalCommand",
    "normalize_metrics",
    "composite_cost",
    "DesignWeights",
    "CoresetSelection",
    "solve_doptimal",
    "equivalence_gap",
    "extract_coreset",
    "DOptimalDesign",
    "fit_wls",
    "rank_candidates",
    "verification_set",
    "rank_diagnostics",
    "LocalSurrogate",
    "PipelineConfig",
    "RunReport",
    "run_dopp",
    "select_final",
    "budget_sweep",
    "multi_seed",
    "report",
]
