"""Out-of-distribution detection by contrasting shifted instances."""

from .audit import audit_report, smoothness_score, total_variation
from .calibration import csi_ens_prob, ece
from .config import RunConfig
from .data import DatasetSplit, Sample, interp_generator, one_class_split
from .metrics import EvalReport, auroc, evaluate, oodness
from .model import ModelBundle, load_checkpoint, save_checkpoint
from .objectives import LossConfig, compute_loss, contrastive_loss
from .scoring import build_coreset, fit_scorer, score
from .transforms import AugmentationPolicy, ShiftFamily, make_shift_family

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "DatasetSplit", "EvalReport", "LossConfig", "ModelBundle", "RunConfig",
    "Sample", "ShiftFamily", "audit_report", "auroc", "build_coreset", "compute_loss",
    "contrastive_loss", "csi_ens_prob", "ece", "evaluate", "fit_scorer", "interp_generator",
    "load_checkpoint", "make_shift_family", "one_class_split", "oodness", "save_checkpoint",
    "score", "smoothness_score", "total_variation",
]
