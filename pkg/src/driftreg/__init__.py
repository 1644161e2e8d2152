"""Deformable registration by direct optimisation of a dense displacement field."""

from .io import load_dvf, load_volume, save_dvf, save_volume
from .losses import MICDIR_WEIGHTS, Flags, LossValue, LossWeights
from .optim import OptimizerConfig
from .phantom import PhantomSpec, make_pair
from .register import (
    RegistrationConfig,
    RegistrationResult,
    inverse_consistency_error,
    micdir_config,
    register,
    register_direct,
    register_micdir,
)
from .volume import DeformationField, LabelMap, Volume

__version__ = "0.1.0"
