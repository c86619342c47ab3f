"""Hybrid motor/speech-imagery EEG decoding: hierarchical teacher, distilled student, CSP+LDA baseline."""

from .data import LabeledTrial, SyntheticConfig, generate_synthetic_dataset, loso_split
from .harness import TrainConfig, evaluate, run_loso
from .models import StudentModel, TeacherModel, count_parameters

__all__ = [
    "LabeledTrial",
    "StudentModel",
    "SyntheticConfig",
    "TeacherModel",
    "TrainConfig",
    "count_parameters",
    "evaluate",
    "generate_synthetic_dataset",
    "loso_split",
    "run_loso",
]
