"""End-to-end multitask Gaussian process RNN classifiers for irregular clinical time series."""

from mgprnn.checkpoint import load_checkpoint, save_checkpoint
from mgprnn.config import RunConfig, SyntheticSpec, TrainConfig, load_run_config
from mgprnn.data import Cohort, EncounterRecord, load_cohort, truncate_to_horizon
from mgprnn import exceptions
from mgprnn.exceptions import *  # noqa: F401,F403
from mgprnn.metrics import ScoredCohort, aupr, auroc, horizon_sweep, precision_at_sensitivity
from mgprnn.mgp import MgpHyperparams, MgpMode, posterior_moments, sample_latents
from mgprnn.synthetic import generate_cohort
from mgprnn.training import Model, ModelVariant, fit, risk_score

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Cohort",
    "EncounterRecord",
    "MgpHyperparams",
    "MgpMode",
    "Model",
    "ModelVariant",
    "RunConfig",
    "ScoredCohort",
    "SyntheticSpec",
    "TrainConfig",
    "aupr",
    "auroc",
    "fit",
    "generate_cohort",
    "horizon_sweep",
    "load_checkpoint",
    "load_cohort",
    "load_run_config",
    "posterior_moments",
    "precision_at_sensitivity",
    "risk_score",
    "sample_latents",
    "save_checkpoint",
    "truncate_to_horizon",
    *exceptions.__all__,
]
