"""Multi-head token-mixer weights shared by the model and the parallel simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import softmax_attention_parallel
from .errors import ShapeError
from .lsm.chunked import lsm_forward_chunked
from .lsm.spec import LsmSpec
from .tensor import Rng, Tensor

# raw gate pre-activation offsets so that fresh layers start with slow decay
GATE_BIAS = {"g": 3.0, "w": -2.0, "alpha": 3.0, "beta": 3.0, "delta": -2.0, "a": 0.0, "b": 0.0}


@dataclass
class MixerWeights:
    """Projections for one ``L`` (linear sequence model) or ``N`` (attention) mixer.

    Gate projections map ``hidden -> heads * prod(gate_shape)`` in head-major
    order, so slicing heads slices contiguous columns. ``spec`` carries the
    per-head static parameters (leading head axis) for ``L`` mixers.
    """

    kind: str
    num_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    gates: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    spec: LsmSpec | None = None

    def __post_init__(self):
        if self.kind not in ("L", "N"):
            raise ValueError(f"mixer kind must be 'L' or 'N', got {self.kind!r}")
        if self.kind == "L" and self.spec is None:
            raise ValueError("an L mixer needs an LsmSpec")
        if self.wq.shape[1] % self.num_heads:
            raise ShapeError(f"projection width {self.wq.shape[1]} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.num_heads

    @classmethod
    def random(cls, kind: str, hidden: int, num_heads: int, lsm: str = "bla", seed: int = 0,
               dtype=np.float64, **spec_kw) -> "MixerWeights":
        rng = Rng(seed).child("mixer", kind, lsm)
        proj = [rng.tensor((hidden, hidden), 1.0 / math.sqrt(hidden), True, dtype) for _ in range(4)]
        if kind == "N":
            return cls(kind, num_heads, *proj)
        d = hidden // num_heads
        spec = LsmSpec.create(lsm, d, num_heads=num_heads, rng=rng, dtype=dtype, **spec_kw)
        gates = {}
        for key, shape in spec.gate_shapes().items():
            width = num_heads * int(np.prod(shape, dtype=np.int64))
            gates[key] = (rng.tensor((hidden, width), 1.0 / math.sqrt(hidden), True, dtype),
                          Tensor(np.full(width, GATE_BIAS[key], dtype), requires_grad=True))
        return cls(kind, num_heads, *proj, gates=gates, spec=spec)

    # -- projections on (B, N, hidden) ------------------------------------
    def _split(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return T.permute(T.reshape(x, (B, N, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``(B, N, hidden) -> Q, K, V`` each ``(B, H, N, d)``."""
        return self._split(x @ self.wq), self._split(x @ self.wk), self._split(x @ self.wv)

    def gate_inputs(self, x: Tensor) -> dict[str, Tensor]:
        """Raw gate pre-activations ``(B, H, N, *gate_shape)``."""
        if self.spec is None:
            return {}
        B, N, _ = x.shape
        out = {}
        for key, shape in self.spec.gate_shapes().items():
            w, b = self.gates[key]
            g = T.reshape(x @ w + b, (B, N, self.num_heads) + shape)
            out[key] = T.permute(g, (0, 2, 1) + tuple(range(3, 3 + len(shape))))
        return out

    def merge(self, O: Tensor) -> Tensor:
        """``(B, H, N, d) -> (B, N, H*d)`` without the output projection."""
        B, H, N, d = O.shape
        return T.reshape(T.permute(O, (0, 2, 1, 3)), (B, N, H * d))

    def output(self, O: Tensor) -> Tensor:
        return self.merge(O) @ self.wo

    def heads_output(self, x: Tensor, chunk_size: int = 64) -> Tensor:
        """Mixer output before ``wo`` for a batch of whole sequences."""
        Q, K, V = self.project(x)
        if self.kind == "N":
            O = softmax_attention_parallel(Q, K, V, causal=True)
        else:
            O = lsm_forward_chunked(Q, K, V, self.gate_inputs(x), self.spec, chunk_size)
        return self.merge(O)

    def __call__(self, x: Tensor, chunk_size: int = 64) -> Tensor:
        return self.heads_output(x, chunk_size) @ self.wo

    def head_slice(self, lo: int, hi: int) -> "MixerWeights":
        """Weights for heads ``lo..hi-1``: column slices of Q/K/V/gates, row slice of ``wo``."""
        d = self.head_dim
        cols = slice(lo * d, hi * d)
        gates = {}
        for key, (w, b) in self.gates.items():
            per = w.shape[1] // self.num_heads
            sl = slice(lo * per, hi * per)
            gates[key] = (w[:, sl], b[sl])
        spec = None
        if self.spec is not None:
            spec = self.spec.with_params(**{k: p[lo:hi] for k, p in self.spec.decay_params.items()}) \
                if self.spec.decay_params else self.spec
        return MixerWeights(self.kind, hi - lo, self.wq[:, cols], self.wk[:, cols], self.wv[:, cols],
                            self.wo[cols, :], gates, spec)

    def tensors(self) -> list[Tensor]:
        out = [self.wq, self.wk, self.wv, self.wo]
        for w, b in self.gates.values():
            out += [w, b]
        if self.spec is not None:
            out += list(self.spec.decay_params.values())
        return out
