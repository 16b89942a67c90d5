"""Bayesian identification of spatially-varying elastic moduli from noisy
displacement data, with per-element constitutive model-discrepancy learning."""

from .fem import (BoundaryData, ConstitutiveBase, Mesh, Walls, add_noise,
                  assemble_equilibrium, build_structured_mesh, forward_solve,
                  standard_boundary_data, strain_displacement)
from .priors import GmrfSpec, NoiseHyperprior, build_gmrf, displacement_gmrf, gmrf_penalty
from .saem import (DiscrepancyParams, EmConfig, EmResult, SufficientStats,
                   constitutive_residual, m_step_component, refine_cascade,
                   run_em, saem_blend)
from .samplers import (GibbsSampler, LatentState, ObservationSet,
                       sample_modulus, sample_noise_precision)
from .synthetic import Dataset, GroundTruth, example1_field, example2_field, make_dataset

__all__ = [
    "BoundaryData", "ConstitutiveBase", "Mesh", "Walls", "add_noise",
    "assemble_equilibrium", "build_structured_mesh", "forward_solve",
    "standard_boundary_data", "strain_displacement",
    "GmrfSpec", "NoiseHyperprior", "build_gmrf", "displacement_gmrf", "gmrf_penalty",
    "DiscrepancyParams", "EmConfig", "EmResult", "SufficientStats",
    "constitutive_residual", "m_step_component", "refine_cascade", "run_em", "saem_blend",
    "GibbsSampler", "LatentState", "ObservationSet", "sample_modulus",
    "sample_noise_precision",
    "Dataset", "GroundTruth", "example1_field", "example2_field", "make_dataset",
]

__version__ = "0.1.0"
