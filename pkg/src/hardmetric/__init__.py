"""Metric learning with easy-to-hard distance reweighting and a
structure-aligned class-centroid memory bank."""

from .data import DatasetSpec, LabeledDataset, generate
from .estimator import HardSampleEmbedder
from .evaluation import EvalProtocol, EvalTable, ablation_report, evaluate
from .model import Condition, FeatureSequence, ModelDims, ModelParams
from .trainer import TrainConfig, train

__all__ = [
    "Condition",
    "DatasetSpec",
    "EvalProtocol",
    "EvalTable",
    "FeatureSequence",
    "HardSampleEmbedder",
    "LabeledDataset",
    "ModelDims",
    "ModelParams",
    "TrainConfig",
    "ablation_report",
    "evaluate",
    "generate",
    "train",
]

__version__ = "0.1.0"
