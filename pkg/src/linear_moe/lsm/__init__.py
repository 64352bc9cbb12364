"""Linear sequence modeling kernels: sequential reference and chunked fast path."""

from .chunked import Canonical, Transition, causal_mask, lsm_forward_chunked, set_fault
from .recurrent import MemoryState, StepInputs, feature_map, lsm_forward_sequential, recurrent_step
from .spec import FAMILIES, INSTANCES, LsmSpec, random_gates

__all__ = [
    "Canonical",
    "FAMILIES",
    "INSTANCES",
    "LsmSpec",
    "MemoryState",
    "StepInputs",
    "Transition",
    "causal_mask",
    "feature_map",
    "lsm_forward_chunked",
    "lsm_forward_sequential",
    "random_gates",
    "recurrent_step",
    "set_fault",
]
