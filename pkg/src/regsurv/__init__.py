"""Region-grounded chest X-ray report generation with multi-modal survival
prediction: anatomical region completion, multi-scale region features,
risk-attentive sentence encoding, prefix-conditioned report decoding, and
two-stage survival fusion, trained in three stages.
"""

from .config import ExperimentConfig, SynthConfig
from .data import (BoundingBox, CohortSample, RegionSet, StructuredReport,
                   SurvivalRecord, load_dataset, save_dataset, split_dataset)
from .survival import RiskBatch, concordance_index, coxph_loss
from .synthetic import generate_synthetic_cohort
from .training import TrainedPipeline, run_inference, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CohortSample", "ExperimentConfig", "RegionSet",
    "RiskBatch", "StructuredReport", "SurvivalRecord", "SynthConfig",
    "TrainedPipeline", "concordance_index", "coxph_loss",
    "generate_synthetic_cohort", "load_dataset", "run_inference",
    "save_dataset", "split_dataset", "train_pipeline", "__version__",
]
