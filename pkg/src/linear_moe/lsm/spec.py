"""Descriptions of the linear sequence modeling instances.

Each instance is identified by a short lowercase name. Instances sharing an
update rule form a *family*: ``lightning`` and ``retnet`` are both
``scalar_decay`` presets, ``gfw`` and ``gateloop`` are ``outer_gate`` presets.

Per-token gate inputs are raw pre-activations passed alongside Q/K/V with
shape ``(..., N, *gate_shape)``. Static parameters (``decay_params``) are
tensors of the bare shape listed in :data:`STATIC_SHAPES`, optionally with
leading per-head axes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..tensor import Rng, Tensor

FAMILIES = {
    "bla": "bla",
    "lightning": "scalar_decay",
    "retnet": "scalar_decay",
    "gla": "gla",
    "deltanet": "deltanet",
    "gated_deltanet": "gated_deltanet",
    "rebased": "rebased",
    "gfw": "outer_gate",
    "gateloop": "outer_gate",
    "ttt": "ttt",
    "titans": "titans",
    "s4": "s4",
    "mamba": "mamba",
    "mamba2": "mamba2",
    "hgrn2": "hgrn2",
    "rwkv6": "rwkv6",
    "rwkv7": "rwkv7",
}

INSTANCES = tuple(FAMILIES)

FEATURE_MAPS = ("identity", "elu_plus_one", "squared")

# How the carried state is transformed between tokens.
#   identity - M_s = M_{s-1} + ...
#   scalar   - one decay per token
#   key      - one decay per key dimension (diag{a_s} M)
#   full     - elementwise decay over the whole d_k x d_v state
#   matrix   - state-dependent left multiplication (delta rule / test-time regression)
TRANSITION = {
    "bla": "identity",
    "rebased": "identity",
    "scalar_decay": "scalar",
    "mamba2": "scalar",
    "gla": "key",
    "hgrn2": "key",
    "rwkv6": "key",
    "outer_gate": "full",
    "s4": "full",
    "mamba": "full",
    "deltanet": "matrix",
    "gated_deltanet": "matrix",
    "ttt": "matrix",
    "titans": "matrix",
    "rwkv7": "matrix",
}


def gate_shapes(family: str, d_k: int, d_v: int) -> dict[str, tuple[int, ...]]:
    """Per-token gate inputs: name -> trailing shape after the token axis."""
    return {
        "gla": {"g": (d_k,)},
        "hgrn2": {"g": (d_k,)},
        "rwkv6": {"w": (d_k,)},
        "rwkv7": {"w": (d_k,), "b": ()},
        "deltanet": {"a": (), "b": ()},
        "gated_deltanet": {"a": (), "b": ()},
        "titans": {"a": (), "b": ()},
        "ttt": {"b": ()},
        "outer_gate": {"alpha": (d_k,), "beta": (d_v,)},
        "mamba": {"delta": (d_k,)},
        "mamba2": {"delta": ()},
    }.get(family, {})


def static_shapes(family: str, d_k: int, d_v: int) -> dict[str, tuple[int, ...]]:
    """Time-independent parameters: name -> bare shape (per head)."""
    return {
        "scalar_decay": {"decay": ()},
        "s4": {"delta": (d_k,), "B": (d_k,), "A_log": (d_k, d_v)},
        "mamba": {"A_log": (d_k, d_v)},
        "mamba2": {"A_log": ()},
    }.get(family, {})


def uses_key_input(family: str) -> bool:
    return family not in ("hgrn2", "s4")


@dataclass(frozen=True)
class LsmSpec:
    """One linear-sequence-modeling instance with its head dimensions."""

    name: str
    d_k: int
    d_v: int
    feature_map: str
    use_normalizer: bool
    decay_params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise ConfigError(f"unknown LSM instance '{self.name}'; expected one of {INSTANCES}")
        if self.feature_map not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature map '{self.feature_map}'")
        if self.d_k < 1 or self.d_v < 1:
            raise ConfigError("head dimensions must be positive")
        if self.use_normalizer and self.transition not in ("identity", "scalar", "key"):
            raise ConfigError(f"{self.name}: normalizer requires an identity, scalar or per-key decay")
        expected = static_shapes(self.family, self.d_k, self.d_v)
        if set(self.decay_params) != set(expected):
            raise ConfigError(
                f"{self.name}: decay_params must be {sorted(expected)}, got {sorted(self.decay_params)}"
            )
        for key, bare in expected.items():
            shape = self.decay_params[key].shape
            if shape[len(shape) - len(bare):] != bare or len(shape) < len(bare):
                raise ConfigError(f"{self.name}: decay_params['{key}'] has shape {shape}, expected (..., {bare})")
        if self.family == "scalar_decay":
            a = self.decay_params["decay"].data
            if np.any(a <= 0) or np.any(a > 1):
                raise ConfigError(f"{self.name}: scalar decay must lie in (0, 1], got {a}")

    @property
    def family(self) -> str:
        return FAMILIES[self.name]

    @property
    def transition(self) -> str:
        return TRANSITION[self.family]

    @property
    def has_chunk_closed_form(self) -> bool:
        return self.transition != "matrix"

    def gate_shapes(self) -> dict[str, tuple[int, ...]]:
        return gate_shapes(self.family, self.d_k, self.d_v)

    def with_params(self, **params: Tensor) -> "LsmSpec":
        merged = dict(self.decay_params)
        merged.update(params)
        return dataclasses.replace(self, decay_params=merged)

    def replace(self, **changes) -> "LsmSpec":
        return dataclasses.replace(self, **changes)

    @classmethod
    def create(
        cls,
        name: str,
        d_k: int,
        d_v: int | None = None,
        *,
        num_heads: int | None = None,
        feature_map: str | None = None,
        use_normalizer: bool | None = None,
        rng: Rng | None = None,
        dtype=np.float64,
    ) -> "LsmSpec":
        """Spec with default feature map, normalizer and static parameters.

        With ``num_heads`` the static parameters get a leading head axis.
        ``rng`` randomises the learnable static parameters (for tests).
        """
        if name not in FAMILIES:
            raise ConfigError(f"unknown LSM instance '{name}'; expected one of {INSTANCES}")
        d_v = d_k if d_v is None else d_v
        if feature_map is None:
            feature_map = {"bla": "elu_plus_one", "rebased": "squared"}.get(name, "identity")
        if use_normalizer is None:
            use_normalizer = name == "bla"
        params = default_static_params(name, d_k, d_v, num_heads, rng, dtype)
        return cls(name, d_k, d_v, feature_map, use_normalizer, params)


def default_static_params(name, d_k, d_v, num_heads=None, rng=None, dtype=np.float64) -> dict[str, Tensor]:
    family = FAMILIES[name]
    heads = 1 if num_heads is None else num_heads
    lead = () if num_heads is None else (num_heads,)
    out: dict[str, np.ndarray] = {}
    if family == "scalar_decay":
        h = np.arange(heads)
        if name == "retnet":
            decay = 1.0 - 2.0 ** (-5.0 - h)
        else:
            decay = np.exp(-(2.0 ** (-8.0 * (h + 1) / heads)))
        out["decay"] = decay.reshape(lead)
    elif family == "s4":
        if rng is None:
            out["delta"] = np.full(lead + (d_k,), math.log(math.expm1(0.1)))
            out["B"] = np.ones(lead + (d_k,))
            out["A_log"] = np.broadcast_to(np.log(np.arange(1, d_k + 1.0))[:, None], lead + (d_k, d_v)).copy()
        else:
            out["delta"] = rng.normal(lead + (d_k,), 0.5)
            out["B"] = rng.normal(lead + (d_k,))
            out["A_log"] = rng.normal(lead + (d_k, d_v), 0.5)
    elif family == "mamba":
        if rng is None:
            out["A_log"] = np.broadcast_to(np.log(np.arange(1, d_k + 1.0))[:, None], lead + (d_k, d_v)).copy()
        else:
            out["A_log"] = rng.normal(lead + (d_k, d_v), 0.5)
    elif family == "mamba2":
        out["A_log"] = np.zeros(lead) if rng is None else rng.normal(lead, 0.5)
    return {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in out.items()}


def random_gates(spec: LsmSpec, n: int, rng: Rng, lead: tuple[int, ...] = (), scale: float = 1.0,
                 dtype=np.float64) -> dict[str, Tensor]:
    """Random raw gate inputs of shape ``lead + (n, *gate_shape)``."""
    return {
        key: Tensor(rng.normal(lead + (n,) + shape, scale, dtype))
        for key, shape in spec.gate_shapes().items()
    }
