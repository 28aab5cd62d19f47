"""Cell-lineage tracking as an integer linear program with cell-state constraints."""
from .evaluation import ErrorReport, count_errors, det_tra, evaluate, match_nodes, tracklet_fraction
from .graph import GraphBuildConfig, build_graph, filter_detections
from .ilp import (
    ConstraintSystem,
    SolveReport,
    SolverError,
    brute_force_solve,
    build_constraints,
    solve,
    solve_blockwise,
)
from .model import (
    CandidateGraph,
    Detection,
    Edge,
    LineageForest,
    build_feature_matrix,
    decode,
    encode,
    objective_value,
)
from .simulator import SimConfig, render_detections, simulate_gt
from .ssvm import (
    HammingCosts,
    LearnConfig,
    best_effort,
    fit_weights,
    grid_search,
    hamming,
    loss_augmented_solve,
    ssvm_loss,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateGraph",
    "ConstraintSystem",
    "Detection",
    "Edge",
    "ErrorReport",
    "GraphBuildConfig",
    "HammingCosts",
    "LearnConfig",
    "LineageForest",
    "SimConfig",
    "SolveReport",
    "SolverError",
    "best_effort",
    "brute_force_solve",
    "build_constraints",
    "build_feature_matrix",
    "build_graph",
    "count_errors",
    "decode",
    "det_tra",
    "encode",
    "evaluate",
    "filter_detections",
    "fit_weights",
    "grid_search",
    "hamming",
    "loss_augmented_solve",
    "match_nodes",
    "objective_value",
    "render_detections",
    "simulate_gt",
    "solve",
    "solve_blockwise",
    "ssvm_loss",
    "tracklet_fraction",
]
