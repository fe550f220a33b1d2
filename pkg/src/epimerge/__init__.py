"""Curvature-aware subspace merging of fine-tuned parameter sets."""

from .checkpoint import (
    AlignmentError,
    CheckpointFormatError,
    ParameterSet,
    TaskVector,
    read_checkpoint,
    task_vector,
    write_checkpoint,
)
from .curvature import CurvatureEstimate, CurvatureSource, accumulate_fisher, subsample_stream
from .diagnostics import DiagnosticsReport, certify_bound, diagnose, eta
from .estimator import SubspaceMerger, merge_models
from .linalg import SolveError, procrustes_orthonormalize, spd_solve, thin_svd
from .merge import Method, MergeConfig
from .subspace import RankGuardError, TaggedBasis, build_tagged_basis, lift, project_diag_curvature, project_vector

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CheckpointFormatError",
    "CurvatureEstimate",
    "CurvatureSource",
    "DiagnosticsReport",
    "MergeConfig",
    "Method",
    "ParameterSet",
    "RankGuardError",
    "SolveError",
    "SubspaceMerger",
    "TaggedBasis",
    "TaskVector",
    "accumulate_fisher",
    "build_tagged_basis",
    "certify_bound",
    "diagnose",
    "eta",
    "lift",
    "merge_models",
    "procrustes_orthonormalize",
    "project_diag_curvature",
    "project_vector",
    "read_checkpoint",
    "spd_solve",
    "subsample_stream",
    "task_vector",
    "thin_svd",
    "write_checkpoint",
]
