"""Joint low-rank Gaussian process models for a scalar spatial outcome and a
functional space-height signal."""

from .collapsed import CollapsedWorkspace, build_workspace, log_collapsed_likelihood, recover_latents, sample_beta
from .domain import DesignSpec, JointDataset, ModelParams, SpaceHeightCoord, assemble_dataset, holdout_split
from .errors import ConfigError, DataError, JointPPError, NumericalFailure
from .kernels import ExponentialKernel, GneitingKernel, cov_matrix
from .reduced_rank import (
    KnotSet,
    ReducedRankStructure,
    StructureBuilder,
    assemble_structure,
    build_basis,
    select_height_knots,
    select_spatial_knots_u,
    select_spatial_knots_v,
)
from .sampler import PosteriorChain, PriorSpec, SamplerConfig, gelman_rubin, log_target, run_chain, run_chains

__version__ = "0.1.0"

__all__ = [
    "CollapsedWorkspace",
    "ConfigError",
    "DataError",
    "DesignSpec",
    "ExponentialKernel",
    "GneitingKernel",
    "JointDataset",
    "JointPPError",
    "KnotSet",
    "ModelParams",
    "NumericalFailure",
    "PosteriorChain",
    "PriorSpec",
    "ReducedRankStructure",
    "SamplerConfig",
    "SpaceHeightCoord",
    "StructureBuilder",
    "assemble_dataset",
    "assemble_structure",
    "build_basis",
    "build_workspace",
    "cov_matrix",
    "gelman_rubin",
    "holdout_split",
    "log_collapsed_likelihood",
    "log_target",
    "recover_latents",
    "run_chain",
    "run_chains",
    "sample_beta",
    "select_height_knots",
    "select_spatial_knots_u",
    "select_spatial_knots_v",
]
