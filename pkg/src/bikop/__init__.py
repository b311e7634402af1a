"""Few-shot image classification with text/vision knowledge permeation and
adversarial channel filtering, on a synthetic compositional dataset."""
from .config import RunConfig, parse_config
from .data import DataConfig, Dataset, Episode, generate_dataset, load_dataset, sample_episode, save_dataset
from .estimator import BiKopClassifier
from .evaluation import EvalReport, compute_mmc, evaluate
from .model import BiKopModel, ModelConfig
from .training import TrainConfig, finetune, pretrain

__all__ = [
    "BiKopClassifier",
    "BiKopModel",
    "DataConfig",
    "Dataset",
    "Episode",
    "EvalReport",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "compute_mmc",
    "evaluate",
    "finetune",
    "generate_dataset",
    "load_dataset",
    "parse_config",
    "pretrain",
    "sample_episode",
    "save_dataset",
]
__version__ = "0.1.0"
