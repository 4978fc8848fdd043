"""Geometric MCMC for PDE-constrained Bayesian inverse problems.

Builds squared-inverse-elliptic Gaussian priors on a regular grid, solves a
nonlinear diffusion-reaction forward model with adjoint sensitivities,
constructs derivative-informed and Karhunen-Loeve reduced bases, trains
reduced-basis MLP surrogates with plain and derivative-informed losses, and
runs a family of dimension-robust MCMC kernels (pCN, MALA, mMALA, LA-pCN,
surrogate-driven and delayed-acceptance variants) with chain diagnostics.
"""

__version__ = "0.1.0"

from .prior import Grid, GaussianPrior, build_prior
from .models import (DiffusionReactionModel, LinearGaussianToy, SolverError,
                     synthesize_data)
from .subspace import ReducedBasis, estimate_dis
from .surrogate import (Dataset, LinearReducedMap, MLPSurrogate,
                        SampleAverageReducedMap, TrainConfig, generate_dataset,
                        generalization_errors, train)
from .geometry import (GeometryPack, LaplacePack, map_estimate, ppg, ppgnh_eig,
                       surrogate_geometry)
from .mcmc import (ChainRecord, KernelConfig, make_kernel, reduced_proposal_sample,
                   run_chain)
from .diagnostics import (TuneReport, ar_msj, ess_percent, sampling_stats,
                          speedup_report, tune_step_size, wasserstein_mpsrf)

__all__ = [
    "Grid", "GaussianPrior", "build_prior",
    "DiffusionReactionModel", "LinearGaussianToy", "SolverError", "synthesize_data",
    "ReducedBasis", "estimate_dis",
    "Dataset", "LinearReducedMap", "MLPSurrogate", "SampleAverageReducedMap",
    "TrainConfig", "generate_dataset", "generalization_errors", "train",
    "GeometryPack", "LaplacePack", "map_estimate", "ppg", "ppgnh_eig",
    "surrogate_geometry",
    "ChainRecord", "KernelConfig", "make_kernel", "reduced_proposal_sample",
    "run_chain",
    "TuneReport", "ar_msj", "ess_percent", "sampling_stats", "speedup_report",
    "tune_step_size", "wasserstein_mpsrf",
    "__version__",
]
