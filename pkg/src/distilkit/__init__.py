"""Distil a compact BiLSTM text classifier from an exported teacher's soft
logits and hidden representations."""

from .estimator import DistilledBiLSTMClassifier
from .evaluation import Corpus, Instance
from .losses import LossWeights
from .student import StudentConfig
from .teacher import OracleTeacher, TeacherRecord
from .tokenizer import Vocab

__all__ = [
    "Corpus",
    "DistilledBiLSTMClassifier",
    "Instance",
    "LossWeights",
    "OracleTeacher",
    "StudentConfig",
    "TeacherRecord",
    "Vocab",
]
__version__ = "0.1.0"
