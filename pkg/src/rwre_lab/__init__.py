"""Simulation and exact-computation laboratory for random walks in i.i.d.
uniformly elliptic random environments on Z^d: lazy seeded environments,
exact quenched dynamic programming, annealed replica averaging,
regeneration statistics, prefactor and local-CLT defect estimators,
quenched/annealed couplings, and a deterministic experiment runner.
"""

__version__ = "0.1.0"

from .coupling import (
    BoxCoupling,
    PointCoupling,
    build_couplings,
    coupled_pair_walk,
    pair_merge_ensemble,
    refine_point_coupling,
    tv_box_coupling,
)
from .dist import (
    ExitLaw,
    PrefactorField,
    SparseLatticeDist,
    constant_one_field,
    delta_dist,
    dump_json,
)
from .environment import (
    Environment,
    EnvironmentSpec,
    drifted_1d_spec,
    environment_from_json,
    homogeneous_spec,
    validate_spec,
)
from .errors import InsufficientDataError, ResourceLimitError
from .estimators import (
    AnnealedDistribution,
    DefectReport,
    annealed_distribution,
    annealed_regularity_report,
    box_average_deviation,
    exit_law_box_defect,
    fixed_time_box_defect,
    intermediate_measures_defects,
    intermediate_measures_report,
    l1_partition_distance,
    l1_point_distance,
    lclt_defect,
    lclt_gaussian,
    prefactor_lclt_defect,
    prefactor_lclt_report,
)
from .lattice import BoxPartition, ParallelogramGeom, classify_point, directions, scale_R
from .quenched import (
    adjoint_evolve,
    cesaro_prefactor,
    env_convolve,
    evolve_forward,
    exit_law,
    normalization_constant,
    prefactor_field,
    quenched_distribution,
)
from .regen import (
    RegenerationEnsemble,
    VelocityEstimate,
    collect_ensemble,
    regen_diagnostics,
    velocity_covariance,
)
from .rng import derive_key128, env_seed, stream
from .walker import (
    RegenerationRecord,
    Trajectory,
    brute_force_regenerations,
    condition_p_probe,
    condition_t_curve,
    detect_regenerations,
    intersection_count,
    simulate_walk,
    wilson_ci,
)
from .cli import ExperimentConfig, main, run_experiment

__all__ = [
    "__version__",
    "AnnealedDistribution",
    "BoxCoupling",
    "BoxPartition",
    "DefectReport",
    "Environment",
    "EnvironmentSpec",
    "ExitLaw",
    "ExperimentConfig",
    "InsufficientDataError",
    "ParallelogramGeom",
    "PointCoupling",
    "PrefactorField",
    "RegenerationEnsemble",
    "RegenerationRecord",
    "ResourceLimitError",
    "SparseLatticeDist",
    "Trajectory",
    "VelocityEstimate",
    "adjoint_evolve",
    "annealed_distribution",
    "annealed_regularity_report",
    "box_average_deviation",
    "brute_force_regenerations",
    "build_couplings",
    "cesaro_prefactor",
    "classify_point",
    "collect_ensemble",
    "condition_p_probe",
    "condition_t_curve",
    "constant_one_field",
    "coupled_pair_walk",
    "delta_dist",
    "derive_key128",
    "detect_regenerations",
    "directions",
    "drifted_1d_spec",
    "dump_json",
    "env_convolve",
    "env_seed",
    "environment_from_json",
    "evolve_forward",
    "exit_law",
    "exit_law_box_defect",
    "fixed_time_box_defect",
    "homogeneous_spec",
    "intermediate_measures_defects",
    "intermediate_measures_report",
    "intersection_count",
    "l1_partition_distance",
    "l1_point_distance",
    "lclt_defect",
    "lclt_gaussian",
    "main",
    "normalization_constant",
    "pair_merge_ensemble",
    "prefactor_field",
    "prefactor_lclt_defect",
    "prefactor_lclt_report",
    "quenched_distribution",
    "refine_point_coupling",
    "regen_diagnostics",
    "run_experiment",
    "scale_R",
    "simulate_walk",
    "stream",
    "tv_box_coupling",
    "validate_spec",
    "velocity_covariance",
    "wilson_ci",
]
