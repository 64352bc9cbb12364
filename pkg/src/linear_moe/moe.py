"""Sparse mixture-of-experts feed-forward layer.

Routing picks the ``top_k`` largest router logits per token (ties go to the
lower expert id) and renormalises with a softmax over the selected logits
only. Every routed token is processed; there is no capacity limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class MoeConfig:
    num_experts: int
    top_k: int
    hidden: int
    ffn_dim: int
    aux_loss_weight: float = 0.01

    def __post_init__(self):
        if self.num_experts < 1 or not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"need 1 <= top_k <= num_experts, got top_k={self.top_k}, E={self.num_experts}")
        if self.hidden < 1 or self.ffn_dim < 1:
            raise ConfigError("MoE dimensions must be positive")


@dataclass(frozen=True)
class RoutingDecision:
    experts: np.ndarray  # (T, k) int, distinct per row
    gates: Tensor  # (T, k), positive, rows sum to 1
    probs: Tensor  # (T, E) full softmax of the router logits


@dataclass
class MoeLayer:
    """Router plus ``E`` SwiGLU experts with stacked weights ``(E, ...)``."""

    config: MoeConfig
    router: Tensor  # (hidden, E)
    w_gate: Tensor  # (E, hidden, ffn)
    w_up: Tensor  # (E, hidden, ffn)
    w_down: Tensor  # (E, ffn, hidden)

    @classmethod
    def init(cls, config: MoeConfig, rng: Rng, dtype=np.float64) -> "MoeLayer":
        h, f, e = config.hidden, config.ffn_dim, config.num_experts
        return cls(
            config,
            rng.tensor((h, e), 1.0 / math.sqrt(h), True, dtype),
            rng.tensor((e, h, f), 1.0 / math.sqrt(h), True, dtype),
            rng.tensor((e, h, f), 1.0 / math.sqrt(h), True, dtype),
            rng.tensor((e, f, h), 1.0 / math.sqrt(f), True, dtype),
        )

    def params(self) -> dict[str, Tensor]:
        return {"router": self.router, "w_gate": self.w_gate, "w_up": self.w_up, "w_down": self.w_down}

    def expert(self, e: int, x: Tensor) -> Tensor:
        return (T.silu(x @ self.w_gate[e]) * (x @ self.w_up[e])) @ self.w_down[e]


def route(X: Tensor, router: Tensor, top_k: int) -> RoutingDecision:
    logits = X @ router
    E = logits.shape[-1]
    if not 1 <= top_k <= E:
        raise ConfigError(f"top_k must lie in [1, {E}], got {top_k}")
    # stable sort of negated logits keeps lower ids first among ties
    ids = np.argsort(-logits.data, axis=-1, kind="stable")[:, :top_k]
    gates = T.softmax(T.gather_last(logits, ids))
    return RoutingDecision(ids, gates, T.softmax(logits))


def routing_fractions(decision: RoutingDecision, num_experts: int) -> np.ndarray:
    counts = np.bincount(decision.experts.reshape(-1), minlength=num_experts)
    return counts / decision.experts.size


def load_balance_loss(decision: RoutingDecision, router_probs: Tensor | None = None) -> Tensor:
    """``E * sum_e f_e P_e`` with ``f`` the routed slot fractions and ``P`` mean router probabilities."""
    probs = decision.probs if router_probs is None else router_probs
    E = probs.shape[-1]
    f = Tensor(routing_fractions(decision, E).astype(probs.dtype))
    return T.sum_(f * T.mean(probs, axis=0)) * float(E)


def moe_forward(X: Tensor, layer: MoeLayer) -> tuple[Tensor, Tensor]:
    """Dropless sparse forward: each expert sees only the tokens routed to it."""
    if X.ndim != 2 or X.shape[1] != layer.config.hidden:
        raise ShapeError(f"moe_forward: expected (T, {layer.config.hidden}) input, got {X.shape}")
    decision = route(X, layer.router, layer.config.top_k)
    rows_all, parts = [], []
    for e in range(layer.config.num_experts):
        rows, slots = np.nonzero(decision.experts == e)
        if rows.size == 0:
            continue
        y = layer.expert(e, T.take(X, rows))
        parts.append(T.scale_rows(y, decision.gates[rows, slots]))
        rows_all.append(rows)
    Y = T.index_add(X.shape[0], np.concatenate(rows_all), T.concat(parts, axis=0))
    return Y, load_balance_loss(decision)


def moe_forward_dense(X: Tensor, layer: MoeLayer) -> Tensor:
    """Reference: run every expert on every token, then weight by the routing mask."""
    decision = route(X, layer.router, layer.config.top_k)
    n, E = X.shape[0], layer.config.num_experts
    weights = np.zeros((n, E))
    np.put_along_axis(weights, decision.experts, decision.gates.data, axis=-1)
    Y = None
    for e in range(E):
        term = T.scale_rows(layer.expert(e, X), Tensor(weights[:, e]))
        Y = term if Y is None else Y + term
    return Y
