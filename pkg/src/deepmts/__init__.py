"""Joint 3D tumor segmentation and survival-risk regression toolkit."""

from .losses import combined_loss, cox_ph_loss, dice_loss
from .metrics import c_index, dsc
from .models import ArchSpec, build_model
from .synth import CohortParams, HazardCoefficients, generate_cohort
from .training import Cohort, TrainSpec, cross_validate, ensemble_predict, train

__all__ = [
    "ArchSpec",
    "Cohort",
    "CohortParams",
    "HazardCoefficients",
    "TrainSpec",
    "build_model",
    "c_index",
    "combined_loss",
    "cox_ph_loss",
    "cross_validate",
    "dice_loss",
    "dsc",
    "ensemble_predict",
    "generate_cohort",
    "train",
]

__version__ = "0.1.0"
