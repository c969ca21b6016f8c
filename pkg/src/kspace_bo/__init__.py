"""Bayesian optimization of parametric k-space sampling densities."""

from .bayesopt import BoConfig, GpModel, acquire_next, expected_improvement, gp_fit, gp_predict, maximin_design, optimize_density
from .core import ConstraintSpec, HardwareParams, ImageGrid, SamplingScheme, hardware_constraints, psnr
from .density import (
    DensityBasis,
    DensityGrid,
    ElementaryParams,
    GeneratorBox,
    HullDomain,
    build_basis,
    elementary_density,
    generate_density,
    project_onto_hull,
    random_generators,
)
from .errors import (
    ConvergenceError,
    DegenerateFamilyError,
    FactorizationError,
    InvalidInputError,
    InvalidParameterError,
    KspaceBoError,
)
from .nuft import InterpWindow, NudftOperator
from .pipeline import RunConfig, baseline_radial_density, build_context, compare_kernels, density_to_scheme, evaluate_density_cost, run_optimize, scan_landscape
from .recon import NoiseSpec, TvConfig, evaluate_scheme_cost, reconstruction_errors, tv_reconstruct
from .sampler import DiscrepancyKernel, SamplerConfig, discrepancy, project_constraints, radial_prefix, sample_scheme

__version__ = "0.1.0"
