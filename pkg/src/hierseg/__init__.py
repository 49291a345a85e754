"""Training-free open-vocabulary semantic segmentation.

The pipeline improves a contrastive image encoder's spatial representation
in two stages: early-layer fusion rebuilds the final block around the
average of all earlier attention maps and re-feeds each early layer's
embeddings through it, and fine-grained compensation sharpens the
resulting coarse score map with chain-multiplied self-attention heads
extracted from a pretrained latent diffusion model.

The linear-algebra core (`attention`), refinement (`compensation`), and
metrics (`metrics`) run on plain numpy arrays; the encoder adapters load
weight bundles and are exercised in tests through miniature synthetic
bundles and recorded fixtures.
"""

from .attention import (
    AttentionStack,
    SquareMap,
    average_maps,
    chain_multiply_heads,
    refine_scores,
    self_self_map,
    softmax_attention,
)
from .compensation import RefinementResult, align_scores, compensate, upsample_scores
from .config import PipelineConfig
from .datasets import DatasetSpec, load_sample
from .diffusion import ExtractionConfig, NoiseSchedule, SDAttention
from .encoder import EncoderHandle, LayerTrace, TraceResult, preprocess, trace_forward
from .errors import (
    ConfigurationError,
    DataError,
    EnvironmentError_,
    HiersegError,
    ShapeError,
    ValidationError,
)
from .fusion import FusedOutputs, FusionConfig, build_avg_attention, fuse, modified_last_block
from .metrics import ConfusionMatrix, StageTimer, average_precision, image_level_metrics
from .pipeline import Pipeline, SegmentationResult, evaluate_dataset
from .scoring import (
    CategorySet,
    ScoreMap,
    TextEmbeddings,
    assign_labels,
    embed_categories,
    similarity_scores,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionStack", "SquareMap", "average_maps", "chain_multiply_heads",
    "refine_scores", "self_self_map", "softmax_attention",
    "RefinementResult", "align_scores", "compensate", "upsample_scores",
    "PipelineConfig", "DatasetSpec", "load_sample",
    "ExtractionConfig", "NoiseSchedule", "SDAttention",
    "EncoderHandle", "LayerTrace", "TraceResult", "preprocess", "trace_forward",
    "ConfigurationError", "DataError", "EnvironmentError_", "HiersegError",
    "ShapeError", "ValidationError",
    "FusedOutputs", "FusionConfig", "build_avg_attention", "fuse",
    "modified_last_block",
    "ConfusionMatrix", "StageTimer", "average_precision", "image_level_metrics",
    "Pipeline", "SegmentationResult", "evaluate_dataset",
    "CategorySet", "ScoreMap", "TextEmbeddings", "assign_labels",
    "embed_categories", "similarity_scores",
]
