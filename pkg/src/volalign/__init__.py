"""Volume-based multimodal alignment for few-shot classification on synthetic embeddings."""

from .errors import VolAlignError
from .geometry import KernelSpec, det_psd, gram, kernel_gram, kernel_volume, volume
from .losses import AlignmentBatch, LossConfig, loss_a2d, loss_align, loss_d2a, loss_infonce
from .fewshot import Episode, grid_search_u, prototypes
from .fusion import FusionConfig, ModelParams, fuse, init_params
from .synthdata import GeneratorConfig, gen_class_centers, gen_episode
from .trainer import TrainConfig, ablate, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentBatch", "Episode", "FusionConfig", "GeneratorConfig", "KernelSpec", "LossConfig",
    "ModelParams", "TrainConfig", "VolAlignError", "ablate", "det_psd", "fuse", "gen_class_centers",
    "gen_episode", "gram", "grid_search_u", "init_params", "kernel_gram", "kernel_volume", "loss_a2d",
    "loss_align", "loss_d2a", "loss_infonce", "prototypes", "train", "volume",
]
