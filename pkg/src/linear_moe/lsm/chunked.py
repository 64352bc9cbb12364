"""Chunkwise evaluation of the unified recurrence.

Inputs are first brought into a canonical form ``M_s = Theta_s <> M_{s-1} +
k_s^T v_s`` where ``Theta_s`` is one of

* nothing (``identity``),
* a log-decay per token (``scalar``), per key row (``key``) or per state
  entry (``full``), applied elementwise, or
* a ``d_k x d_k`` matrix applied from the left (``matrix``).

Elementwise decays admit a closed form per chunk: a decay-weighted masked
score matrix for tokens inside the chunk plus the carried state scaled by the
cumulative decay. Matrix transitions depend on the state itself and are
folded token by token inside each chunk; only the state crosses chunks.

All kernels here work on a flattened batch axis ``B``; the public entry
point reshapes arbitrary leading axes in and out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import DegenerateNormalizerError, ShapeError
from ..tensor import Tensor
from .recurrent import NORMALIZER_FLOOR, MemoryState, feature_map
from .spec import LsmSpec

_FAULTS: set[str] = set()
KNOWN_FAULTS = ("chunk_decay",)


def set_fault(name: str, enabled: bool = True) -> None:
    """Deliberately break a kernel (verification suites use this to prove they can fail)."""
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault '{name}'")
    (_FAULTS.add if enabled else _FAULTS.discard)(name)


def causal_mask(n: int, dtype=np.float64) -> Tensor:
    """Multiplicative causal mask: 1 where ``i >= j``, 0 above the diagonal."""
    if n < 1:
        raise ShapeError(f"causal_mask: N must be >= 1, got {n}")
    return Tensor(np.tril(np.ones((n, n), dtype=dtype)))


@dataclass(frozen=True)
class Canonical:
    """Sequence in canonical form, all tensors with leading ``(B, N)`` axes."""

    kind: str
    q: Tensor
    k: Tensor
    v: Tensor
    decay: Tensor | None = None

    @property
    def length(self) -> int:
        return self.q.shape[1]

    def slice(self, start: int, stop: int) -> "Canonical":
        sl = (slice(None), slice(start, stop))
        return Canonical(self.kind, self.q[sl], self.k[sl], self.v[sl],
                         None if self.decay is None else self.decay[sl])

    def with_value(self, v: Tensor) -> "Canonical":
        return Canonical(self.kind, self.q, self.k, v, self.decay)


@dataclass(frozen=True)
class Transition:
    """Net effect of a span of tokens on a carried state.

    ``value`` is a summed log-decay for elementwise kinds, the product of the
    per-token matrices for ``matrix``, and ``None`` for ``identity``.
    """

    kind: str
    value: Tensor | None

    def apply(self, S: Tensor) -> Tensor:
        return apply_transition(self, S)


def _bcast_rows(x: Tensor, n: int) -> Tensor:
    """``(B, *s) -> (B, n, *s)`` by repetition along a new token axis."""
    return T.broadcast_to(T.reshape(x, (x.shape[0], 1) + x.shape[1:]), (x.shape[0], n) + x.shape[1:])


def _scale_batch(x: Tensor, a: Tensor) -> Tensor:
    """Scale each batch entry of ``x`` by ``a`` where ``a`` has the leading axes of ``x``."""
    extra = x.ndim - a.ndim
    return T.broadcast_to(T.reshape(a, a.shape + (1,) * extra), x.shape) * x


def _flat_static(param: Tensor, lead: tuple[int, ...], bare: tuple[int, ...]) -> Tensor:
    B = int(np.prod(lead)) if lead else 1
    full = param if param.shape == lead + bare else T.broadcast_to(param, lead + bare)
    return T.reshape(full, (B,) + bare)


def canonicalize(Q: Tensor, K: Tensor, V: Tensor, gates: dict[str, Tensor], spec: LsmSpec) -> Canonical:
    """Map an instance's inputs to (feature-mapped q, effective k, v, transition)."""
    lead, n = Q.shape[:-2], Q.shape[-2]
    B = int(np.prod(lead)) if lead else 1
    dk, dv = spec.d_k, spec.d_v
    if Q.shape[-1] != dk or K.shape != Q.shape or V.shape != lead + (n, dv):
        raise ShapeError(f"lsm_forward_chunked: shapes Q{Q.shape} K{K.shape} V{V.shape} do not match d_k={dk}, d_v={dv}")
    q = feature_map(T.reshape(Q, (B, n, dk)), spec.feature_map)
    fk = feature_map(T.reshape(K, (B, n, dk)), spec.feature_map)
    v = T.reshape(V, (B, n, dv))
    g = {}
    for key, shape in spec.gate_shapes().items():
        if key not in gates:
            raise ShapeError(f"{spec.name} needs gate input '{key}'")
        if gates[key].shape != lead + (n,) + shape:
            raise ShapeError(f"gate '{key}' has shape {gates[key].shape}, expected {lead + (n,) + shape}")
        g[key] = T.reshape(gates[key], (B, n) + shape)
    p = spec.decay_params
    fam = spec.family

    if fam in ("bla", "rebased"):
        return Canonical("identity", q, fk, v)
    if fam == "scalar_decay":
        log_a = T.log(_flat_static(p["decay"], lead, ()))
        return Canonical("scalar", q, fk, v, _bcast_rows(log_a, n))
    if fam == "mamba2":
        b = T.softplus(g["delta"])
        a = _bcast_rows(T.exp(_flat_static(p["A_log"], lead, ())), n)
        return Canonical("scalar", q, T.scale_rows(fk, b), v, -(a * b))
    if fam == "gla":
        return Canonical("key", q, fk, v, T.logsigmoid(g["g"]))
    if fam == "hgrn2":
        return Canonical("key", q, 1.0 - T.sigmoid(g["g"]), v, T.logsigmoid(g["g"]))
    if fam == "rwkv6":
        return Canonical("key", q, fk, v, -T.exp(g["w"]))
    if fam == "outer_gate":
        la = T.reshape(T.logsigmoid(g["alpha"]), (B, n, dk, 1))
        lb = T.reshape(T.logsigmoid(g["beta"]), (B, n, 1, dv))
        full = T.broadcast_to(la, (B, n, dk, dv)) + T.broadcast_to(lb, (B, n, dk, dv))
        return Canonical("full", q, fk, v, full)
    if fam == "s4":
        delta = T.softplus(_flat_static(p["delta"], lead, (dk,)))
        A = T.exp(_flat_static(p["A_log"], lead, (dk, dv)))
        k_eff = _bcast_rows(delta * _flat_static(p["B"], lead, (dk,)), n)
        return Canonical("full", q, k_eff, v, _bcast_rows(-T.scale_rows(A, delta), n))
    if fam == "mamba":
        delta = T.softplus(g["delta"])
        A = _bcast_rows(T.exp(_flat_static(p["A_log"], lead, (dk, dv))), n)
        return Canonical("full", q, delta * fk, v, -T.scale_rows(A, delta))

    # matrix transitions
    eye = Tensor(np.broadcast_to(np.eye(dk, dtype=Q.dtype), (B, n, dk, dk)))
    if fam in ("deltanet", "gated_deltanet"):
        kn = T.l2_normalize(fk)
        a, b = T.sigmoid(g["a"]), T.sigmoid(g["b"])
        proj = T.outer(kn, kn)
        G = eye - _scale_batch(proj, a) if fam == "deltanet" else _scale_batch(eye - proj, a)
        return Canonical("matrix", q, T.scale_rows(kn, b), v, G)
    eta = T.sigmoid(g["b"])
    kn = T.l2_normalize(fk)
    if fam == "ttt":
        base = eye
    elif fam == "titans":
        base = _scale_batch(eye, T.sigmoid(g["a"]))
    else:  # rwkv7
        base = T.scale_rows(eye, T.exp(-T.exp(g["w"])))
    G = base - _scale_batch(T.outer(kn, kn), eta)
    return Canonical("matrix", q, T.scale_rows(kn, eta), v, G)


def apply_transition(tr: Transition, S: Tensor) -> Tensor:
    if tr.kind == "identity":
        return S
    if tr.kind == "scalar":
        return _scale_batch(S, T.exp(tr.value))
    if tr.kind == "key":
        return T.scale_rows(S, T.exp(tr.value))
    if tr.kind == "full":
        return T.exp(tr.value) * S
    return tr.value @ S


def compose(later: Transition, earlier: Transition) -> Transition:
    """Transition equivalent to applying ``earlier`` and then ``later``."""
    if later.kind == "identity":
        return earlier
    if later.kind == "matrix":
        return Transition("matrix", later.value @ earlier.value)
    return Transition(later.kind, later.value + earlier.value)


def _pair_diff(cum: Tensor) -> Tensor:
    """``cum[:, t] - cum[:, s]`` for every (t, s): ``(B, c, *s) -> (B, c, c, *s)``."""
    B, c = cum.shape[:2]
    rest = cum.shape[2:]
    target = (B, c, c) + rest
    col = T.broadcast_to(T.reshape(cum, (B, c, 1) + rest), target)
    row = T.broadcast_to(T.reshape(cum, (B, 1, c) + rest), target)
    return col - row


def _mask_for(c: int, rest: tuple[int, ...], dtype) -> Tensor:
    psi = np.tril(np.ones((c, c), dtype=dtype))
    return Tensor(np.broadcast_to(psi.reshape((c, c) + (1,) * len(rest)), (c, c) + rest))


def chunk_forward(chunk: Canonical, S: Tensor | None) -> tuple[Tensor, Tensor, Transition]:
    """Outputs for one chunk given the carried state ``S`` (``None`` = zero).

    Returns ``(O, S_next, transition)``; ``transition`` summarises the
    chunk's effect on any incoming state.
    """
    if chunk.kind == "matrix":
        return _chunk_matrix(chunk, S)
    q, k, v = chunk.q, chunk.k, chunk.v
    B, c = q.shape[:2]
    kind = chunk.kind
    dtype = q.dtype

    if kind == "identity":
        psi = _mask_for(c, (), dtype)
        O = ((q @ k.T) * psi) @ v
        if S is not None:
            O = O + q @ S
        S_next = k.T @ v if S is None else S + k.T @ v
        return O, S_next, Transition("identity", None)

    cum = T.cumsum(chunk.decay, axis=1)
    last = cum[:, c - 1]
    inter_cum = cum - chunk.decay if "chunk_decay" in _FAULTS else cum
    psi = _mask_for(c, cum.shape[2:], dtype)
    D = T.exp(_pair_diff(cum) * psi) * psi
    tail = T.exp(_bcast_rows(last, c) - cum)

    if kind == "scalar":
        O = ((q @ k.T) * D) @ v
        if S is not None:
            O = O + T.scale_rows(q @ S, T.exp(inter_cum))
        S_new = T.scale_rows(k, tail).T @ v
    elif kind == "key":
        scores = T.einsum("btk,bsk,btsk->bts", q, k, D)
        O = scores @ v
        if S is not None:
            O = O + (q * T.exp(inter_cum)) @ S
        S_new = (k * tail).T @ v
    else:  # full
        O = T.einsum("btk,bsk,bsv,btskv->btv", q, k, v, D)
        if S is not None:
            O = O + T.einsum("btk,btkv,bkv->btv", q, T.exp(inter_cum), S)
        S_new = T.einsum("bsk,bsv,bskv->bkv", k, v, tail)

    tr = Transition(kind, last)
    if S is not None:
        S_new = apply_transition(tr, S) + S_new
    return O, S_new, tr


def _chunk_matrix(chunk: Canonical, S: Tensor | None) -> tuple[Tensor, Tensor, Transition]:
    B, c, dk = chunk.q.shape
    dv = chunk.v.shape[-1]
    outs = []
    G_total = None
    for s in range(c):
        G = chunk.decay[:, s]
        upd = T.outer(chunk.k[:, s], chunk.v[:, s])
        S = upd if S is None else G @ S + upd
        G_total = G if G_total is None else G @ G_total
        outs.append(T.reshape(T.reshape(chunk.q[:, s], (B, 1, dk)) @ S, (B, dv)))
    return T.stack(outs, axis=1), S, Transition("matrix", G_total)


def lsm_forward_chunked(Q: Tensor, K: Tensor, V: Tensor, gates: dict[str, Tensor], spec: LsmSpec,
                        chunk_size: int, initial_state: MemoryState | None = None,
                        return_state: bool = False):
    """Chunkwise evaluation; matches :func:`lsm_forward_sequential`.

    ``chunk_size`` need not divide N; the last chunk is ragged.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if Q.ndim < 2 or Q.shape[-2] < 1:
        raise ShapeError(f"lsm_forward_chunked: need at least one token, got Q shape {Q.shape}")
    lead, n = Q.shape[:-2], Q.shape[-2]
    B = int(np.prod(lead)) if lead else 1
    can = canonicalize(Q, K, V, gates, spec)
    if spec.use_normalizer:
        can = can.with_value(T.concat([can.v, T.ones((B, n, 1), Q.dtype)], axis=-1))
    S = None if initial_state is None else _pack_state(initial_state, spec, B)

    outs = []
    for start in range(0, n, chunk_size):
        O, S, _ = chunk_forward(can.slice(start, min(start + chunk_size, n)), S)
        outs.append(O)
    O = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    O = finish_output(O, spec)
    O = T.reshape(O, lead + (n, spec.d_v))
    if not return_state:
        return O
    step = n + (0 if initial_state is None else initial_state.step)
    return O, _unpack_state(S, spec, lead, step)


def finish_output(O: Tensor, spec: LsmSpec) -> Tensor:
    """Divide out the normalizer column when the spec uses one."""
    if not spec.use_normalizer:
        return O
    d = spec.d_v
    den = O[..., d]
    if np.any(np.abs(den.data) < NORMALIZER_FLOOR):
        raise DegenerateNormalizerError(f"{spec.name}: degenerate normalizer")
    return T.scale_rows(O[..., :d], 1.0 / den)


def _pack_state(state: MemoryState, spec: LsmSpec, B: int) -> Tensor:
    M = T.reshape(state.M, (B, spec.d_k, spec.d_v))
    if not spec.use_normalizer:
        return M
    z = state.z if state.z is not None else T.zeros(state.M.shape[:-1], state.M.dtype)
    return T.concat([M, T.reshape(z, (B, spec.d_k, 1))], axis=-1)


def _unpack_state(S: Tensor, spec: LsmSpec, lead: tuple[int, ...], step: int) -> MemoryState:
    d = spec.d_v
    if spec.use_normalizer:
        return MemoryState(T.reshape(S[..., :d], lead + (spec.d_k, d)),
                           T.reshape(S[..., d], lead + (spec.d_k,)), step)
    return MemoryState(T.reshape(S, lead + (spec.d_k, d)), None, step)


def pack_state(state: MemoryState, spec: LsmSpec, B: int) -> Tensor:
    return _pack_state(state, spec, B)


def unpack_state(S: Tensor, spec: LsmSpec, lead: tuple[int, ...], step: int = 0) -> MemoryState:
    return _unpack_state(S, spec, lead, step)
