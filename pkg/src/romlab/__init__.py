"""Desk-scale reduced-order modeling of incompressible 2D flow.

Snapshot generation with a small projection-method flow solver, POD
basis construction with supremizer enrichment, Galerkin operator
assembly, data-driven correction fitting, reduced time integration,
error metrics, and a batch CLI pipeline with a bit-exact archive
format.
"""

from .archive import (ArchiveError, crc64, import_matrix_csv, list_entries,
                      load_archive, save_archive)
from .closure import (CorrectionModel, DataRankOperators, build_design_matrix,
                      constrain_velocity_model, default_rank_grid,
                      exact_pressure_corrections_ppe,
                      exact_pressure_corrections_sup,
                      exact_velocity_correction, fit_ppe_joint,
                      fit_ppe_separate, fit_pressure_sup, fit_truncated_lsq,
                      fit_velocity_correction, pack_features, quad_pairs,
                      select_rank)
from .fom import (FomConfig, SnapshotSet, poisson_solve, run_fom,
                  taylor_green_fields)
from .grid import BoundaryCondition, Grid
from .metrics import (align_times, error_metric_p, error_metric_u,
                      reconstruction_error_series, relative_error_series)
from .operators import (ReducedOperators, assemble_data_rank,
                        assemble_ppe_operators, assemble_sup_operators)
from .pipeline import ConfigError, NumericalError, Pipeline, load_config
from .pod import (EnrichedBasis, PodBasis, compute_pod, eigen_decay_report,
                  enrich_with_supremizers, snapshot_coefficients,
                  supremizer_snapshots)
from .rom import RomModelSpec, RomTrajectory, solve_rom

__version__ = "0.1.0"

__all__ = [
    "ArchiveError", "BoundaryCondition", "ConfigError", "CorrectionModel",
    "DataRankOperators", "EnrichedBasis", "FomConfig", "Grid",
    "NumericalError", "Pipeline", "PodBasis", "ReducedOperators",
    "RomModelSpec", "RomTrajectory", "SnapshotSet", "align_times",
    "assemble_data_rank", "assemble_ppe_operators", "assemble_sup_operators",
    "build_design_matrix", "compute_pod", "constrain_velocity_model", "crc64",
    "default_rank_grid", "eigen_decay_report", "enrich_with_supremizers",
    "error_metric_p", "error_metric_u", "exact_pressure_corrections_ppe",
    "exact_pressure_corrections_sup", "exact_velocity_correction",
    "fit_ppe_joint", "fit_ppe_separate", "fit_pressure_sup",
    "fit_truncated_lsq", "fit_velocity_correction", "import_matrix_csv",
    "list_entries", "load_archive", "load_config", "pack_features",
    "poisson_solve", "quad_pairs", "reconstruction_error_series",
    "relative_error_series", "run_fom", "save_archive",
    "select_rank", "snapshot_coefficients", "solve_rom",
    "supremizer_snapshots", "taylor_green_fields",
]
