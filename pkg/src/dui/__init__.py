"""Machine unlearning with influence functions and an HSIC independence regulariser."""
from .config import ConfigError, ExperimentConfig
from .datasets import DatasetTable, GraphDataset, SplitSpec
from .independence import DistributionalLoss, IndependenceConfig, KernelConfig
from .models import ModelSpec, TrainOptions
from .requests import UnlearnRequest, apply, random_request, topk_request
from .unlearn import UnlearnConfig, UnlearnResult, unlearn

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DatasetTable", "DistributionalLoss", "ExperimentConfig", "GraphDataset",
    "IndependenceConfig", "KernelConfig", "ModelSpec", "SplitSpec", "TrainOptions", "UnlearnConfig",
    "UnlearnRequest", "UnlearnResult", "apply", "random_request", "topk_request", "unlearn",
]
