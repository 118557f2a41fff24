"""Joint breast-ultrasound lesion segmentation and classification.

A shared image encoder feeds a mask decoder and a classification head. In the
mask-guided variant the classifier pools encoder features under attention
derived from a lesion mask, trained with a ground-truth to predicted-mask
curriculum.
"""

from .core import CLASS_ORDER, ClassLabel, ConfigError, RunConfig, Sample, validate_config
from .estimator import MultiTaskBUSClassifier
from .metrics import MetricsReport, compute_report
from .model import MultiTaskNet, build_model
from .trainer import CurriculumSchedule, load_checkpoint, run_curriculum

__version__ = "0.1.0"

__all__ = [
    "CLASS_ORDER", "ClassLabel", "ConfigError", "CurriculumSchedule", "MetricsReport", "MultiTaskBUSClassifier",
    "MultiTaskNet", "RunConfig", "Sample", "build_model", "compute_report", "load_checkpoint", "run_curriculum",
    "validate_config",
]
