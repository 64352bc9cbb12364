"""Sequence parallelism over simulated ranks.

The sequence is cut into ``T`` contiguous chunks, one per rank. Linear
sequence model layers exchange only fixed-size memory states; attention
layers all-gather keys and values.

Causal (masked) LSM layers generalise the plain prefix sum to decayed and
matrix transitions: every rank summarises its chunk as ``(state from zero,
net transition)``, the summaries are all-gathered, and each rank folds the
summaries of earlier ranks into its incoming state. Document boundaries in a
packed stream cut the fold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ..attention import softmax_attention_parallel
from ..lsm.chunked import Canonical, canonicalize, chunk_forward, compose, finish_output
from ..lsm.recurrent import feature_map
from ..mixer import MixerWeights
from ..model import Model, PackedBatch, prev_positions
from ..tensor import Tensor
from .collectives import RankContext, RankGroup, prefix_sum_states


@dataclass(frozen=True)
class ChunkedSequence:
    """Per-rank chunks of a ``(N, ...)`` sequence; sizes differ by at most one."""

    chunks: tuple[Tensor, ...]
    starts: tuple[int, ...]
    length: int

    def __post_init__(self):
        if sum(c.shape[0] for c in self.chunks) != self.length:
            raise ShapeError("chunks do not cover the sequence")

    @property
    def ranks(self) -> int:
        return len(self.chunks)

    def gather(self) -> Tensor:
        return T.concat(list(self.chunks), axis=0)


def split_sequence(n: int, ranks: int) -> list[tuple[int, int]]:
    if ranks < 1 or n < ranks:
        raise ShapeError(f"cannot split {n} tokens over {ranks} ranks")
    base, extra = divmod(n, ranks)
    bounds = [0]
    for r in range(ranks):
        bounds.append(bounds[-1] + base + (1 if r < extra else 0))
    return list(zip(bounds[:-1], bounds[1:]))


def distribute(X: Tensor, ranks: int) -> ChunkedSequence:
    spans = split_sequence(X.shape[0], ranks)
    return ChunkedSequence(tuple(X[a:b] for a, b in spans), tuple(a for a, _ in spans), X.shape[0])


def _as_chunked(X, ranks: int) -> ChunkedSequence:
    if isinstance(X, ChunkedSequence):
        if X.ranks != ranks:
            raise ShapeError(f"sequence split over {X.ranks} ranks, group has {ranks}")
        return X
    return distribute(X, ranks)


# ---------------------------------------------------------------------------
# local pieces
# ---------------------------------------------------------------------------
def _canonical(weights: MixerWeights, x3: Tensor) -> Canonical:
    Q, K, V = weights.project(x3)
    spec = weights.spec
    can = canonicalize(Q, K, V, weights.gate_inputs(x3), spec)
    if spec.use_normalizer:
        B, n = can.v.shape[:2]
        can = can.with_value(T.concat([can.v, T.ones((B, n, 1), x3.dtype)], axis=-1))
    return can


def local_pass(can: Canonical, chunk_size: int, S: Tensor | None):
    """Chunkwise pass over a span: ``(O, final state, net transition)``."""
    outs, tr = [], None
    for a in range(0, can.length, chunk_size):
        O, S, t = chunk_forward(can.slice(a, min(a + chunk_size, can.length)), S)
        outs.append(O)
        tr = t if tr is None else compose(t, tr)
    return (outs[0] if len(outs) == 1 else T.concat(outs, axis=1)), S, tr


def _finish(weights: MixerWeights, O: Tensor, x3: Tensor) -> Tensor:
    """``(H, n, d[+1])`` canonical output -> ``(1, n, hidden)`` after ``wo``."""
    O = finish_output(O, weights.spec)
    H, n, d = O.shape
    return weights.output(T.reshape(O, (1, H, n, d)))


def lsm_masked_body(ctx: RankContext, weights: MixerWeights, x3: Tensor, chunk_size: int,
                    local_starts=(), resets=None, layer: str = ""):
    """Causal LSM mixer for this rank's ``(1, n, hidden)`` chunk (use with ``yield from``).

    ``local_starts`` lists document starts inside the chunk (relative, may
    include 0); ``resets[i]`` says rank ``i``'s chunk contains a document start.
    """
    can = _canonical(weights, x3)
    n = can.length
    cuts = sorted({0, n} | {int(s) for s in local_starts})
    outs, S_local, first_tr = [], None, None
    for a, b in zip(cuts[:-1], cuts[1:]):
        O, S_local, tr = local_pass(can.slice(a, b), chunk_size, None)
        outs.append(O)
        first_tr = tr if first_tr is None else first_tr
    P = yield from prefix_sum_states(ctx, S_local, first_tr, resets, layer)
    if P is not None and 0 not in local_starts:
        outs[0] = local_pass(can.slice(cuts[0], cuts[1]), chunk_size, P)[0]
    O = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return _finish(weights, O, x3)


def lsm_nomask_body(ctx: RankContext, weights: MixerWeights, x3: Tensor, layer: str = ""):
    """Non-causal LSM mixer: one all-gather of the chunk states, then ``O_t = Q_t M``."""
    spec = weights.spec
    if spec.transition != "identity":
        raise ValueError(f"{spec.name}: the unmasked algorithm needs an undecayed (identity) transition")
    can = _canonical(weights, x3)
    states = yield ctx.all_gather(T.swap_last(can.k) @ can.v, layer, "state")
    M = states[0]
    for S in states[1:]:
        M = M + S
    return _finish(weights, can.q @ M, x3)


def attention_body(ctx: RankContext, weights: MixerWeights, x3: Tensor, offset: int,
                   key_start=None, layer: str = ""):
    """Causal attention for this rank's chunk against all-gathered keys and values."""
    Q, K, V = weights.project(x3)
    Ks = yield ctx.all_gather(K, layer, "k")
    Vs = yield ctx.all_gather(V, layer, "v")
    O = softmax_attention_parallel(Q, T.concat(Ks, axis=2), T.concat(Vs, axis=2),
                                   causal=True, q_offset=offset, key_start=key_start)
    return weights.output(O)


# ---------------------------------------------------------------------------
# single-layer drivers
# ---------------------------------------------------------------------------
def _x3(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape)


def _unbatch(y: Tensor) -> Tensor:
    return T.reshape(y, y.shape[1:])


def sp_forward_nomask(group: RankGroup, X, weights: MixerWeights, layer: str = "lsm") -> list[Tensor]:
    """Encoder-style (non-causal) LSM layer; returns per-rank output chunks."""
    seq = _as_chunked(X, group.size)

    def body(ctx):
        y = yield from lsm_nomask_body(ctx, weights, _x3(seq.chunks[ctx.rank]), layer)
        return _unbatch(y)

    return group.run(body)


def sp_forward_masked(group: RankGroup, X, weights: MixerWeights, chunk_size: int = 64,
                      layer: str = "lsm") -> list[Tensor]:
    """Causal LSM layer; equals the single-rank chunked/sequential forward."""
    seq = _as_chunked(X, group.size)

    def body(ctx):
        y = yield from lsm_masked_body(ctx, weights, _x3(seq.chunks[ctx.rank]), chunk_size, layer=layer)
        return _unbatch(y)

    return group.run(body)


def sp_attention_allgather(group: RankGroup, X, weights: MixerWeights, layer: str = "attn") -> list[Tensor]:
    seq = _as_chunked(X, group.size)
    if len({c.shape for c in seq.chunks}) != 1:
        raise ShapeError(f"attention SP needs equal chunks; {seq.length} tokens over {group.size} ranks")

    def body(ctx):
        y = yield from attention_body(ctx, weights, _x3(seq.chunks[ctx.rank]), seq.starts[ctx.rank], layer=layer)
        return _unbatch(y)

    return group.run(body)


def nomask_reference(X: Tensor, weights: MixerWeights) -> Tensor:
    """Single-rank non-causal linear attention: ``phi(Q) (phi(K)^T V)`` per head."""
    x3 = _x3(X)
    Q, K, V = weights.project(x3)
    spec = weights.spec
    q, k = feature_map(Q, spec.feature_map), feature_map(K, spec.feature_map)
    O = q @ (T.swap_last(k) @ V)
    if spec.use_normalizer:
        den = q @ (T.swap_last(k) @ T.ones(k.shape[:-1] + (1,), X.dtype))
        O = O * T.broadcast_to(T.power(den, -1.0), O.shape)
    return _unbatch(weights.output(O))


# ---------------------------------------------------------------------------
# whole hybrid model
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RankSlice:
    start: int
    stop: int
    local_starts: tuple[int, ...]
    key_start: np.ndarray


def plan_ranks(packed: PackedBatch, ranks: int) -> tuple[list[RankSlice], list[bool]]:
    """Per-rank spans and the document metadata each rank needs (replicated, not communicated)."""
    n = len(packed.tokens)
    starts = packed.boundaries[:-1]
    doc_of = np.searchsorted(packed.boundaries, np.arange(n), side="right") - 1
    doc_start = packed.boundaries[doc_of]
    plans, resets = [], []
    for a, b in split_sequence(n, ranks):
        inside = starts[(starts >= a) & (starts < b)] - a
        plans.append(RankSlice(a, b, tuple(int(s) for s in inside), doc_start[a:b]))
        resets.append(bool(inside.size))
    return plans, resets


def hybrid_sp_forward(group: RankGroup, model: Model, packed: PackedBatch) -> list[tuple[Tensor, Tensor]]:
    """Run ``model`` with its sequence split over ``group``; per-rank ``(logits, aux)``.

    ``L`` layers use the masked state-passing algorithm, ``N`` layers the
    key/value all-gather. The MoE auxiliary loss is computed over each rank's
    own tokens.
    """
    n = len(packed.tokens)
    if "N" in model.config.pattern and n % group.size:
        raise ShapeError(f"attention layers need {n} tokens to split evenly over {group.size} ranks")
    plans, resets = plan_ranks(packed, group.size)
    prev = prev_positions(packed)
    prev_tokens = np.where(prev >= 0, packed.tokens[np.maximum(prev, 0)], -1)
    cfg = model.config

    def body(ctx):
        p = plans[ctx.rank]
        x = model.embed(packed.tokens[p.start:p.stop], prev_tokens[p.start:p.stop])
        aux = []
        for i, kind in enumerate(cfg.pattern):
            h = _x3(T.rms_norm(x, model.params[f"layers.{i}.norm1"], cfg.norm_eps))
            weights = model.mixer_weights(i)
            if kind == "L":
                y = yield from lsm_masked_body(ctx, weights, h, cfg.chunk_size, p.local_starts, resets, f"layers.{i}")
            else:
                y = yield from attention_body(ctx, weights, h, p.start, p.key_start, f"layers.{i}")
            x = x + _unbatch(y)
            out, a = model.moe(i, T.rms_norm(x, model.params[f"layers.{i}.norm2"], cfg.norm_eps))
            x = x + out
            aux.append(a)
        return model.head(x), T.mean(T.stack(aux))

    return group.run(body)
