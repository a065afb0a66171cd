"""Joint affine and vector-momentum SVF registration by optimization."""
from .affine import AffineOptConfig, AffineParams, optimize_affine_multiscale
from .grid import GridSpec, LabelImage, ScalarImage, TransformMap, VectorField
from .pipeline import RegistrationJob, register, run_job
from .vsvf import VsvfConfig, multi_step_vsvf, optimize_vsvf_multiscale

__all__ = [
    "AffineOptConfig", "AffineParams", "GridSpec", "LabelImage", "RegistrationJob", "ScalarImage",
    "TransformMap", "VectorField", "VsvfConfig", "multi_step_vsvf", "optimize_affine_multiscale",
    "optimize_vsvf_multiscale", "register", "run_job",
]
