"""Voltage stability indices for radial distribution feeders.

Exact index from the determinant of the reduced power-flow Jacobian, a
local approximate index built from per-bus measurements, error bounds,
and distributed/hierarchical aggregation of the approximate index.
"""

from .consensus import (
    CommGraph,
    ConsensusTrace,
    PartitionNode,
    hierarchical_aggregate,
    metropolis_weights,
    partition_from_tree,
    random_partition,
    run_consensus,
)
from .errors import (
    BadImpedance,
    BaseInfeasible,
    DegenerateDirection,
    DimensionMismatch,
    DuplicateParent,
    InfeasibleError,
    InputError,
    InvalidPartition,
    MalformedFile,
    NegativeDeterminant,
    NonpositiveDiagTerm,
    NotATree,
    NotConnected,
    NotConverged,
    RadialVSIError,
    RhoOutOfRange,
)
from .feeders import bundled_feeder, gen_feeder, path_network, star_network, two_bus
from .index import (
    IndexReport,
    avsi,
    avsi_terms,
    diag_term_global,
    diag_term_local,
    diag_terms_global,
    diag_terms_local,
    error_bounds,
    index_report,
    spectral_radius,
)
from .jacobian import (
    JacobianBundle,
    LogDet,
    build_full_jacobian,
    build_reduced_jacobian,
    jacobian_bundle,
    log_det,
    vsi,
)
from .network import (
    Line,
    LoadScenario,
    NetworkTree,
    emit_network,
    from_matpower,
    incidence_matrices,
    parse_case,
    parse_loads,
    parse_network,
    path_impedances,
    read_case,
    reverse_edges_check,
)
from .powerflow import (
    ContinuationTrace,
    OperatingPoint,
    SolveReport,
    bfm_residual,
    find_loadability_limit,
    solve_power_flow,
    uniform_ray,
)
from .estimators import LocalAVSI, StabilityIndices

__version__ = "0.1.0"
