from .adam import AdamState, adam_step
from .checkpoint import (CHECKPOINT_VERSION, CheckpointError, load_checkpoint,
                         save_checkpoint)
from .graph import (BN_DEFAULT_EPS, BN_DEFAULT_MOMENTUM, ComputationGraph,
                    GraphNode, ParamStore, backward, forward, glorot_uniform)
from .ops import OPS, NumericError, OpDef, ShapeError

__all__ = [
    "AdamState", "adam_step",
    "CHECKPOINT_VERSION", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "BN_DEFAULT_EPS", "BN_DEFAULT_MOMENTUM", "ComputationGraph", "GraphNode",
    "ParamStore", "backward", "forward", "glorot_uniform",
    "OPS", "NumericError", "OpDef", "ShapeError",
]
