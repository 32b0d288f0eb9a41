"""Training-free open-vocabulary segmentation on a CLIP vision tower.

The package splits into seven areas: float32 kernels (``kernels``), the
binary weight container (``container``), the instrumented transformer
forward (``engine``), sparsity/AUC measurement (``measures``), the
layer/head diagnostics (``diagnostics``), the inference-time interventions
(``strategies``), and the sliding-window segmentation pipeline
(``segmentation``). ``service`` wraps it all in an HTTP API and ``cli``
is a thin client over that service.
"""

from .container import (TextEmbeddings, VitConfig, VitWeights, load_text_embeddings,
                        load_weights)
from .engine import Engine, TapRequest, forward, tokenize
from .errors import (ConfigError, ContainerError, DataError, NumericsError,
                     ShapeError, VitsegError)
from .measures import AbnormalCriterion, detect_abnormal, hoyer_score, rank_auc
from .segmentation import ClassMap, EvalMetrics, SlideConfig, miou, slide_segment
from .strategies import StrategyConfig, vitb_defaults, vitl_defaults
from .types import HeadFeature, LayerTap, TokenSequence

__version__ = "0.1.0"

__all__ = [
    "AbnormalCriterion", "ClassMap", "ConfigError", "ContainerError",
    "DataError", "Engine", "EvalMetrics", "HeadFeature", "LayerTap",
    "NumericsError", "ShapeError", "SlideConfig", "StrategyConfig",
    "TapRequest", "TextEmbeddings", "TokenSequence", "VitConfig",
    "VitWeights", "VitsegError", "detect_abnormal", "forward", "hoyer_score",
    "load_text_embeddings", "load_weights", "miou", "rank_auc",
    "slide_segment", "tokenize", "vitb_defaults", "vitl_defaults",
]
