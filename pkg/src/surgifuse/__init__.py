"""Recurrent multimodal fusion for instrument tracking and distance estimation."""

from .config import ConfigurationError, build_config, load_yaml
from .datamodel import (
    Annotation,
    DatasetError,
    DatasetManifest,
    MultimodalFrame,
    ScanGeometry,
    SequenceRecord,
    ValidationError,
    load_dataset,
    save_sequence,
    window,
)
from .encoders import ColumnDescriptorSet, FeaturePyramid, IoctEmbedder, OpmiEncoder, corrupt_columns
from .fusion import FusionConfig, FusionModule, sinusoidal_encode
from .heads import (
    Detection,
    HeadConfig,
    PredictionHeads,
    assign_targets,
    decode_detections,
    decode_distance,
    greedy_nms,
)
from .losses import LossWeights, dfl, focal_loss, giou_loss, total_loss
from .metrics import MetricsReport, compute_distance_metrics, compute_kp_dist, compute_map50
from .model import VARIANTS, ModelConfig, SurgiFuseModel
from .pipeline import (
    TrainConfig,
    bench_latency,
    corruption_study,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .synthgen import GeneratorConfig, generate_sequence
from .temporal import RecurrentState, TemporalConfig, TemporalModule, cosine_contrastive_loss

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "ColumnDescriptorSet",
    "ConfigurationError",
    "DatasetError",
    "DatasetManifest",
    "Detection",
    "FeaturePyramid",
    "FusionConfig",
    "FusionModule",
    "GeneratorConfig",
    "HeadConfig",
    "IoctEmbedder",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "MultimodalFrame",
    "OpmiEncoder",
    "PredictionHeads",
    "RecurrentState",
    "ScanGeometry",
    "SequenceRecord",
    "SurgiFuseModel",
    "TemporalConfig",
    "TemporalModule",
    "TrainConfig",
    "VARIANTS",
    "ValidationError",
    "assign_targets",
    "bench_latency",
    "build_config",
    "compute_distance_metrics",
    "compute_kp_dist",
    "compute_map50",
    "corrupt_columns",
    "corruption_study",
    "cosine_contrastive_loss",
    "decode_detections",
    "decode_distance",
    "dfl",
    "evaluate",
    "focal_loss",
    "generate_sequence",
    "giou_loss",
    "greedy_nms",
    "load_checkpoint",
    "load_dataset",
    "load_yaml",
    "save_checkpoint",
    "save_sequence",
    "sinusoidal_encode",
    "total_loss",
    "train",
    "window",
]
