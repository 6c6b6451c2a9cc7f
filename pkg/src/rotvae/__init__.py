"""Multi-domain translation with a rotation-structured class prior on a two-block VAE."""
from .errors import RotVAEError
from .model import ArchitectureConfig, build_model
from .prior_geometry import PriorSpec, build_prior_spec, rotate_latent, translation_matrix

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "PriorSpec",
    "RotVAEError",
    "build_model",
    "build_prior_spec",
    "rotate_latent",
    "translation_matrix",
]
