"""Token-level hybrid attention: per-chunk routing between softmax attention
and a gated delta-rule linear attention, with hand-written gradients on numpy."""
from .block import ABLATIONS, BlockConfig, block_backward, block_forward, init_block_params
from .config import ConfigError, RunConfig
from .model import ModelConfig, TrainConfig, init_params, model_forward
from .numerics import NumericalError, ParamStore, ShapeError
from .router import ChunkRouting

__version__ = "0.1.0"

__all__ = ["ABLATIONS", "BlockConfig", "ChunkRouting", "ConfigError", "ModelConfig",
           "NumericalError", "ParamStore", "RunConfig", "ShapeError", "TrainConfig",
           "block_backward", "block_forward", "init_block_params", "init_params",
           "model_forward"]
