"""Pure and hybrid Linear-MoE language models.

A model is a stack of pre-norm residual blocks, one per character of the
layer pattern: ``L`` blocks mix tokens with a linear sequence model, ``N``
blocks with causal softmax attention. Every block then applies an MoE
feed-forward layer. Weights live in one flat ``name -> Tensor`` dict so that
optimisers, checkpoints and the parallel simulator can address them by name.

Packed input is one flat token stream with document boundaries. Token mixers
never see across a boundary: documents are grouped by length, run as a batch,
and scattered back into stream order.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateNormalizerError, NonFiniteError, ShapeError
from .lsm.spec import FAMILIES, LsmSpec, static_shapes
from .mixer import GATE_BIAS, MixerWeights
from .moe import MoeConfig, MoeLayer, moe_forward
from .tensor import Rng, Tensor

CHECKPOINT_FORMAT = "linear-moe-checkpoint/1"
IGNORE_INDEX = -1

FROZEN_STATIC = {"decay"}


def parse_pattern(pattern: str, num_layers: int | None = None) -> str:
    if not pattern or set(pattern) - {"L", "N"}:
        raise ConfigError(f"layer pattern must be a nonempty string over {{L, N}}, got {pattern!r}")
    if num_layers is not None and len(pattern) != num_layers:
        raise ConfigError(f"pattern {pattern!r} has {len(pattern)} layers, config says {num_layers}")
    return pattern


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    ffn_dim: int
    num_heads: int
    num_layers: int
    num_experts: int
    num_active: int
    vocab_size: int
    lsm: str = "bla"
    pattern: str = ""
    norm_eps: float = 1e-6
    aux_loss_weight: float = 0.01
    feature_map: str | None = None
    use_normalizer: bool | None = None
    chunk_size: int = 64
    token_shift: bool = False
    tie_embeddings: bool = False

    def __post_init__(self):
        if not self.pattern:
            object.__setattr__(self, "pattern", "L" * self.num_layers)
        parse_pattern(self.pattern, self.num_layers)
        if self.hidden < 1 or self.num_heads < 1 or self.hidden % self.num_heads:
            raise ConfigError(f"hidden {self.hidden} must be a positive multiple of num_heads {self.num_heads}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.lsm not in FAMILIES:
            raise ConfigError(f"unknown LSM instance {self.lsm!r}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        self.moe_config()
        self.lsm_template()

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def moe_config(self) -> MoeConfig:
        return MoeConfig(self.num_experts, self.num_active, self.hidden, self.ffn_dim, self.aux_loss_weight)

    def lsm_template(self) -> LsmSpec:
        return LsmSpec.create(self.lsm, self.head_dim, num_heads=self.num_heads,
                              feature_map=self.feature_map, use_normalizer=self.use_normalizer)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # Ratios of the two smallest published Linear-MoE configurations at 1/8 width.
    "A0.3B-toy": dict(hidden=128, ffn_dim=112, num_heads=8, num_layers=12, num_experts=64, num_active=8),
    "A1B-toy": dict(hidden=256, ffn_dim=128, num_heads=16, num_layers=16, num_experts=64, num_active=8),
}


def preset(name: str, vocab_size: int = 258, hybrid: bool = False, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    fields_ = dict(PRESETS[name], vocab_size=vocab_size)
    if hybrid:
        fields_["pattern"] = "LLLN" * (fields_["num_layers"] // 4)
    fields_.update(overrides)
    return ModelConfig(**fields_)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PackedBatch:
    tokens: np.ndarray
    boundaries: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        b = self.boundaries
        if b.ndim != 1 or len(b) < 2 or b[0] != 0 or b[-1] != len(self.tokens):
            raise ValueError(f"boundaries must run from 0 to {len(self.tokens)}, got {b.tolist()}")
        if np.any(np.diff(b) <= 0):
            raise ValueError(f"boundaries must be strictly ascending (no empty documents), got {b.tolist()}")
        if self.labels.shape != self.tokens.shape:
            raise ValueError("labels and tokens differ in length")

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def num_docs(self) -> int:
        return len(self.boundaries) - 1

    def document(self, i: int) -> "PackedBatch":
        lo, hi = int(self.boundaries[i]), int(self.boundaries[i + 1])
        return PackedBatch(self.tokens[lo:hi], np.array([0, hi - lo]), self.labels[lo:hi])


def pack_sequences(docs, labels=None) -> PackedBatch:
    """Concatenate documents; default labels are next tokens within each document."""
    docs = [np.asarray(d, dtype=np.int64) for d in docs]
    if not docs:
        raise ValueError("pack_sequences: no documents")
    for i, d in enumerate(docs):
        if d.ndim != 1 or d.size == 0:
            raise ValueError(f"pack_sequences: document {i} is empty")
    bounds = np.concatenate([[0], np.cumsum([len(d) for d in docs])]).astype(np.int64)
    if labels is None:
        labels = [np.append(d[1:], IGNORE_INDEX) for d in docs]
    lab = np.concatenate([np.asarray(x, dtype=np.int64) for x in labels])
    return PackedBatch(np.concatenate(docs), bounds, lab)


def prev_positions(packed: PackedBatch) -> np.ndarray:
    """Index of the previous token in the same document, or -1 at document starts."""
    prev = np.arange(len(packed.tokens)) - 1
    prev[packed.boundaries[:-1]] = -1
    return prev


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
Mixer = Callable[[int, str, Tensor], Tensor]


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "Model":
        rng = Rng(seed)
        c = config
        h, H = c.hidden, c.num_heads
        p: dict[str, Tensor] = {"embed": rng.tensor((c.vocab_size, h), 1.0, True, dtype)}
        if c.token_shift:
            p["prev_embed"] = rng.tensor((c.vocab_size, h), 1.0, True, dtype)
        template = c.lsm_template()
        buffers = {}
        out_scale = 1.0 / math.sqrt(h * 2 * c.num_layers)
        for i, kind in enumerate(c.pattern):
            pre = f"layers.{i}"
            lrng = rng.child("layer", i)
            p[f"{pre}.norm1"] = Tensor(np.ones(h, dtype), requires_grad=True)
            p[f"{pre}.norm2"] = Tensor(np.ones(h, dtype), requires_grad=True)
            for w in ("wq", "wk", "wv"):
                p[f"{pre}.mixer.{w}"] = lrng.tensor((h, h), 1.0 / math.sqrt(h), True, dtype)
            p[f"{pre}.mixer.wo"] = lrng.tensor((h, h), out_scale, True, dtype)
            if kind == "L":
                for key, shape in template.gate_shapes().items():
                    width = H * int(np.prod(shape, dtype=np.int64))
                    p[f"{pre}.mixer.gate.{key}.w"] = lrng.tensor((h, width), 0.1 / math.sqrt(h), True, dtype)
                    p[f"{pre}.mixer.gate.{key}.b"] = Tensor(np.full(width, GATE_BIAS[key], dtype), requires_grad=True)
                for key, value in template.decay_params.items():
                    target = buffers if key in FROZEN_STATIC else p
                    target[f"{pre}.mixer.static.{key}"] = Tensor(value.data.astype(dtype), requires_grad=key not in FROZEN_STATIC)
            moe = MoeLayer.init(c.moe_config(), lrng.child("moe"), dtype)
            for key, value in moe.params().items():
                p[f"{pre}.moe.{key}"] = value
        p["final_norm"] = Tensor(np.ones(h, dtype), requires_grad=True)
        if not c.tie_embeddings:
            p["head"] = rng.tensor((h, c.vocab_size), 1.0 / math.sqrt(h), True, dtype)
        return cls(config, p, buffers)

    # -- bookkeeping -------------------------------------------------------
    def num_params(self, predicate: Callable[[str], bool] = lambda name: True) -> int:
        return sum(t.size for name, t in self.params.items() if predicate(name))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return Model(self.config, dict(params), self.buffers)

    def _p(self, name: str) -> Tensor:
        return self.params[name] if name in self.params else self.buffers[name]

    # -- pieces ------------------------------------------------------------
    def lsm_spec(self, i: int) -> LsmSpec:
        c = self.config
        template = c.lsm_template()
        statics = {k: self._p(f"layers.{i}.mixer.static.{k}") for k in static_shapes(template.family, 1, 1)}
        return template.with_params(**statics) if statics else template

    def mixer_weights(self, i: int) -> MixerWeights:
        """View of layer ``i``'s mixer tensors (shared, so gradients reach the model)."""
        pre = f"layers.{i}.mixer"
        kind = self.config.pattern[i]
        proj = [self.params[f"{pre}.{w}"] for w in ("wq", "wk", "wv", "wo")]
        if kind == "N":
            return MixerWeights("N", self.config.num_heads, *proj)
        spec = self.lsm_spec(i)
        gates = {k: (self.params[f"{pre}.gate.{k}.w"], self.params[f"{pre}.gate.{k}.b"]) for k in spec.gate_shapes()}
        return MixerWeights("L", self.config.num_heads, *proj, gates=gates, spec=spec)

    def local_mixer(self, i: int, kind: str, x: Tensor) -> Tensor:
        """Token mixer on a ``(B, N, hidden)`` batch of whole documents."""
        return self.mixer_weights(i)(x, self.config.chunk_size)

    def embed(self, tokens: np.ndarray, prev_tokens: np.ndarray | None = None) -> Tensor:
        """Token embeddings; ``prev_tokens`` (``-1`` at document starts) feeds the token-shift table."""
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ShapeError(f"token id out of range [0, {self.config.vocab_size})")
        x = T.take(self.params["embed"], tokens)
        if self.config.token_shift:
            if prev_tokens is None:
                raise ShapeError("token_shift models need previous token ids")
            keep = (prev_tokens >= 0).astype(x.dtype)
            shifted = T.take(self.params["prev_embed"], np.where(prev_tokens >= 0, prev_tokens, 0))
            x = x + T.scale_rows(shifted, Tensor(keep))
        return x

    def moe(self, i: int, x: Tensor) -> tuple[Tensor, Tensor]:
        pre = f"layers.{i}.moe"
        layer = MoeLayer(self.config.moe_config(), *(self.params[f"{pre}.{k}"] for k in ("router", "w_gate", "w_up", "w_down")))
        return moe_forward(x, layer)

    def head(self, x: Tensor) -> Tensor:
        x = T.rms_norm(x, self.params["final_norm"], self.config.norm_eps)
        w = T.swap_last(self.params["embed"]) if self.config.tie_embeddings else self.params["head"]
        return x @ w

    def blocks(self, x: Tensor, mixer: Mixer) -> tuple[Tensor, Tensor]:
        """Run every block over flat ``(tokens, hidden)`` states; returns states and mean aux loss."""
        eps = self.config.norm_eps
        aux = []
        for i, kind in enumerate(self.config.pattern):
            try:
                x = x + mixer(i, kind, T.rms_norm(x, self.params[f"layers.{i}.norm1"], eps))
                y, a = self.moe(i, T.rms_norm(x, self.params[f"layers.{i}.norm2"], eps))
            except (NonFiniteError, DegenerateNormalizerError) as err:
                if getattr(err, "layer", None) is None:
                    err.layer, err.instance = i, self.config.lsm if kind == "L" else "attention"
                    err.args = (f"layer {i} ({err.instance}): {err}",)
                raise
            x = x + y
            aux.append(a)
        return x, T.mean(T.stack(aux))

    # -- whole model -------------------------------------------------------
    def forward(self, packed: PackedBatch) -> tuple[Tensor, Tensor]:
        """Logits ``(total_len, vocab)`` and the mean MoE auxiliary loss."""
        tokens = packed.tokens
        prev = prev_positions(packed)
        prev_tokens = np.where(prev >= 0, tokens[np.maximum(prev, 0)], -1)
        x = self.embed(tokens, prev_tokens)
        groups = _length_groups(packed)

        def mixer(i: int, kind: str, h: Tensor) -> Tensor:
            return _grouped(h, groups, lambda x3: self.local_mixer(i, kind, x3))

        x, aux = self.blocks(x, mixer)
        return self.head(x), aux

    def forward_batch(self, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """Equal-length documents ``(B, N)``; logits come back as ``(B*N, vocab)``."""
        B, N = tokens.shape
        return self.forward(pack_sequences(list(tokens), labels=[np.zeros(N, np.int64)] * B))


def _length_groups(packed: PackedBatch) -> list[tuple[int, np.ndarray]]:
    """``(length, row indices (B, length))`` per distinct document length."""
    starts, lengths = packed.boundaries[:-1], packed.lengths
    groups = []
    for n in sorted(set(lengths.tolist())):
        s = starts[lengths == n]
        groups.append((n, s[:, None] + np.arange(n)[None, :]))
    return groups


def _grouped(h: Tensor, groups, fn: Callable[[Tensor], Tensor]) -> Tensor:
    total, hidden = h.shape
    if len(groups) == 1:
        n, rows = groups[0]
        return T.reshape(fn(T.reshape(h, (rows.shape[0], n, hidden))), (total, hidden))
    order = np.concatenate([rows.reshape(-1) for _, rows in groups])
    outs = [T.reshape(fn(T.reshape(T.take(h, rows.reshape(-1)), rows.shape + (hidden,))), (rows.size, hidden))
            for _, rows in groups]
    inverse = np.empty_like(order)
    inverse[order] = np.arange(total)
    return T.take(T.concat(outs, axis=0), inverse)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model.init(config, seed, dtype)


def model_forward(model: Model, packed: PackedBatch) -> Tensor:
    return model.forward(packed)[0]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over positions whose label is not ``IGNORE_INDEX``."""
    labels = np.asarray(labels)
    rows = np.nonzero(labels != IGNORE_INDEX)[0]
    if rows.size == 0:
        raise ValueError("cross_entropy: no labelled positions")
    lp = T.log_softmax(T.take(logits, rows))
    return -T.mean(T.gather_last(lp, labels[rows][:, None]))


def lm_loss(logits: Tensor, labels: np.ndarray, aux_loss: Tensor | None = None, aux_weight: float = 0.0) -> Tensor:
    loss = cross_entropy(logits, labels)
    if aux_loss is not None and aux_weight:
        loss = loss + aux_loss * aux_weight
    return loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path, model: Model, step: int = 0) -> Path:
    """``.npz`` with one array per weight plus a JSON ``__meta__`` entry (format, step, config)."""
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "step": int(step), "config": model.config.to_dict()}
    arrays = {name: t.data for name, t in model.params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[Model, int]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = ModelConfig.from_dict(meta["config"])
        model = Model.init(config, dtype=z["embed"].dtype)
        missing = set(model.params) - set(z.files)
        if missing:
            raise ValueError(f"checkpoint lacks weights: {sorted(missing)[:5]}")
        for name in model.params:
            model.params[name] = Tensor(z[name], requires_grad=True)
    return model, int(meta["step"])
