"""Response-conditioned communication-graph policy."""
from .encoder import (DropoutMasks, EncoderCache, draw_dropout_masks, encode,
                      encoder_backward, encoder_forward)
from .estimator import CommunicationPolicy
from .graph import (DecodeConfig, GraphPlan, edge_logits, graph_log_prob,
                    sample_graph)
from .params import (CheckpointError, CheckpointVersionError,
                     MalformedCheckpointError, PolicyParameters, init_params,
                     load_params, save_params)

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "CommunicationPolicy",
    "DecodeConfig",
    "DropoutMasks",
    "EncoderCache",
    "GraphPlan",
    "MalformedCheckpointError",
    "PolicyParameters",
    "draw_dropout_masks",
    "edge_logits",
    "encode",
    "encoder_backward",
    "encoder_forward",
    "graph_log_prob",
    "init_params",
    "load_params",
    "sample_graph",
    "save_params",
]
