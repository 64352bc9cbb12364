"""Softmax attention: parallel form for training and an incremental KV-cache form."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

MASK_VALUE = -1e30


def causal_keep(n_q: int, n_k: int, q_offset: int = 0, key_start=None) -> np.ndarray:
    """Boolean ``(n_q, n_k)``: query ``i`` (global position ``q_offset + i``) may see key ``j``.

    ``key_start[i]`` optionally bounds the visible keys from below (the start
    of query ``i``'s document in a packed stream).
    """
    j = np.arange(n_k)[None, :]
    keep = j <= (q_offset + np.arange(n_q))[:, None]
    if key_start is not None:
        keep &= j >= np.asarray(key_start)[:, None]
    return keep


def attention_weights(Q: Tensor, K: Tensor, causal: bool = True, q_offset: int = 0, key_start=None) -> Tensor:
    if Q.ndim < 2 or K.ndim < 2:
        raise ShapeError(f"attention: need (..., N, d) inputs, got {Q.shape} and {K.shape}")
    n_q, d = Q.shape[-2:]
    if n_q == 0 or K.shape[-2] == 0:
        raise ShapeError("attention: N must be >= 1")
    if K.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} != key dim {K.shape[-1]}")
    scores = (Q @ T.swap_last(K)) * (1.0 / math.sqrt(d))
    if causal:
        keep = causal_keep(n_q, K.shape[-2], q_offset, key_start)
        scores = T.masked_fill(scores, np.broadcast_to(~keep, scores.shape), MASK_VALUE)
    return T.softmax(scores)


def softmax_attention_parallel(Q: Tensor, K: Tensor, V: Tensor, causal: bool = True,
                               q_offset: int = 0, key_start=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    ``K``/``V`` may be longer than ``Q``; with ``causal`` the queries sit at
    global positions ``q_offset .. q_offset + N_q - 1`` of the key sequence.
    """
    if K.shape[:-1] != V.shape[:-1]:
        raise ShapeError(f"attention: keys {K.shape} and values {V.shape} disagree")
    return attention_weights(Q, K, causal, q_offset, key_start) @ V


@dataclass(frozen=True)
class KvCache:
    keys: tuple[Tensor, ...] = ()
    values: tuple[Tensor, ...] = ()

    @property
    def length(self) -> int:
        return len(self.keys)

    def element_count(self) -> int:
        return sum(k.size for k in self.keys) + sum(v.size for v in self.values)


def softmax_attention_step(cache: KvCache, q: Tensor, k: Tensor, v: Tensor) -> tuple[KvCache, Tensor]:
    """Append ``(k, v)`` and attend from ``q`` over everything cached so far."""
    if len(cache.keys) != len(cache.values):
        raise ShapeError("KvCache: keys and values out of step")
    cache = KvCache(cache.keys + (k,), cache.values + (v,))
    Ks = T.stack(list(cache.keys), axis=-2)
    Vs = T.stack(list(cache.values), axis=-2)
    lead = q.shape[:-1]
    q2 = T.reshape(q, lead + (1, q.shape[-1]))
    o = softmax_attention_parallel(q2, Ks, Vs, causal=False)
    return cache, T.reshape(o, lead + (v.shape[-1],))


def softmax_attention_decode(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, KvCache]:
    """Token-by-token decode; the stacked outputs equal the causal parallel form."""
    cache = KvCache()
    outs = []
    for s in range(Q.shape[-2]):
        cache, o = softmax_attention_step(cache, Q[..., s, :], K[..., s, :], V[..., s, :])
        outs.append(o)
    return T.stack(outs, axis=-2), cache
