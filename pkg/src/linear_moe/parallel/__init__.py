"""Simulated multi-rank execution: collectives with sequence, tensor and data parallelism."""

from .collectives import CommRecord, RankContext, RankGroup, all_reduce, prefix_sum_states, read_trace
from .mesh import MeshResult, ParallelConfig, data_sequence_grads
from .sp import (
    ChunkedSequence,
    distribute,
    hybrid_sp_forward,
    split_sequence,
    sp_attention_allgather,
    sp_forward_masked,
    sp_forward_nomask,
)
from .tp import TpReport, tp_forward, tp_shard_check

__all__ = [
    "ChunkedSequence",
    "MeshResult",
    "ParallelConfig",
    "TpReport",
    "data_sequence_grads",
    "tp_forward",
    "tp_shard_check",
    "CommRecord",
    "RankContext",
    "RankGroup",
    "all_reduce",
    "distribute",
    "hybrid_sp_forward",
    "prefix_sum_states",
    "read_trace",
    "split_sequence",
    "sp_attention_allgather",
    "sp_forward_masked",
    "sp_forward_nomask",
]
