"""Self-supervised contrastive pretraining with composite pretext-class
discrimination: margin-augmented noise contrastive estimation over image
and jigsaw-patch views, memory-bank negatives, and group-wise cross-level
discrimination on spherical k-means clusters."""

from .autodiff import Tensor, backward, finite_difference_check
from .bank import MemoryBank
from .clustering import ClusterModel, spherical_kmeans
from .data import Dataset, DatasetSpec, ImageSample, JigsawPatchSet, generate_synthetic_dataset
from .encoder import EmbeddingBatch, Encoder, EncoderConfig, ProjectionHead
from .losses import LossBreakdown, LossConfig, cpcd_loss
from .metrics import MetricsReport, compute_metrics, topk_accuracy
from .probe import ProbeConfig, train_probe
from .trainer import TrainConfig, train_pretext

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_difference_check",
    "MemoryBank", "ClusterModel", "spherical_kmeans",
    "Dataset", "DatasetSpec", "ImageSample", "JigsawPatchSet", "generate_synthetic_dataset",
    "EmbeddingBatch", "Encoder", "EncoderConfig", "ProjectionHead",
    "LossBreakdown", "LossConfig", "cpcd_loss",
    "MetricsReport", "compute_metrics", "topk_accuracy",
    "ProbeConfig", "train_probe",
    "TrainConfig", "train_pretext",
    "__version__",
]
