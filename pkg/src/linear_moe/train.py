"""Toy-scale training loop: Adam, cosine schedule, JSONL metrics, final checkpoint."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import BOS, RunConfig, resolve_out
from .errors import DegenerateNormalizerError, NonFiniteError
from .metrics import MetricsRecord, MetricsWriter, write_curve
from .model import Model, ModelConfig, PackedBatch, cross_entropy, pack_sequences, save_checkpoint
from .mqar import MqarDataset, gen_mqar, query_accuracy
from .optim import Adam, cosine_lr
from .parallel import RankGroup, hybrid_sp_forward
from .tensor import Rng, Tape, Tensor

EVAL_SEED_OFFSET = 1_000_003


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, cause: Exception):
        op, layer, instance = (getattr(cause, k, None) for k in ("op", "layer", "instance"))
        where = f"layer {layer}" if layer is not None else "outside the blocks"
        super().__init__(f"numerical failure at step {step}, {where} (instance {instance or 'n/a'}, "
                         f"op {op or 'n/a'}): {cause}", op, layer, instance)
        self.step = step


def memory_elements(config: ModelConfig, length: int) -> int:
    """Decode-time memory for one sequence of ``length`` tokens, in elements.

    Linear layers keep a ``heads x d x d`` state (plus a normalizer column when
    used) regardless of length; attention layers cache keys and values.
    """
    d, H = config.head_dim, config.num_heads
    spec = config.lsm_template()
    state = H * d * (d + (1 if spec.use_normalizer else 0))
    return sum(state if kind == "L" else 2 * length * config.hidden for kind in config.pattern)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
class MqarTask:
    def __init__(self, cfg: RunConfig):
        self.train = gen_mqar(cfg.seed, cfg.mqar_pairs, cfg.mqar_vocab, cfg.mqar_queries, cfg.train_samples)
        self.eval = gen_mqar(cfg.seed + EVAL_SEED_OFFSET, cfg.mqar_pairs, cfg.mqar_vocab, cfg.mqar_queries,
                             cfg.eval_samples)
        self.rng = Rng(cfg.seed).child("batches")
        self.batch_size = cfg.batch_size

    def next_batch(self) -> PackedBatch:
        return self.train.batch(self.rng.integers(0, self.train.num_samples, self.batch_size))

    def evaluate(self, model: Model) -> dict:
        return evaluate_mqar(model, self.eval)


class TextTask:
    """Byte-level windows of a text file, each prefixed with BOS."""

    def __init__(self, cfg: RunConfig):
        data = np.frombuffer(Path(cfg.text_path).read_bytes(), dtype=np.uint8).astype(np.int64)
        self.window = cfg.seq_len - 1
        if data.size <= self.window:
            raise ValueError(f"{cfg.text_path}: need more than {self.window} bytes, got {data.size}")
        self.data = data
        self.rng = Rng(cfg.seed).child("batches")
        self.batch_size = cfg.batch_size
        starts = Rng(cfg.seed).child("eval").integers(0, data.size - self.window, min(cfg.eval_samples, 64))
        self.eval_batch = self._batch(starts)

    def _batch(self, starts) -> PackedBatch:
        return pack_sequences([np.concatenate([[BOS], self.data[s:s + self.window]]) for s in starts])

    def next_batch(self) -> PackedBatch:
        return self._batch(self.rng.integers(0, self.data.size - self.window, self.batch_size))

    def evaluate(self, model: Model) -> dict:
        logits, _ = model.forward(self.eval_batch)
        return {"eval_loss": cross_entropy(logits, self.eval_batch.labels).item()}


def evaluate_mqar(model: Model, data: MqarDataset, batch: int = 64) -> dict:
    correct = total = 0
    for a in range(0, data.num_samples, batch):
        rows = np.arange(a, min(a + batch, data.num_samples))
        packed = data.batch(rows)
        logits, _ = model.forward(packed)
        n = int(np.sum(packed.labels >= 0))
        correct += query_accuracy(logits.data, packed.labels) * n
        total += n
    return {"accuracy": correct / total}


def make_task(cfg: RunConfig):
    return MqarTask(cfg) if cfg.task == "mqar" else TextTask(cfg)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    records: list[MetricsRecord]
    evaluation: dict
    out_dir: Path | None = None
    files: dict[str, Path] = field(default_factory=dict)


def _loss(model: Model, packed: PackedBatch, sp: int) -> tuple[Tensor, Tensor, int]:
    if sp == 1:
        logits, aux = model.forward(packed)
        comm = 0
    else:
        group = RankGroup(sp)
        outs = hybrid_sp_forward(group, model, packed)
        logits = T.concat([lg for lg, _ in outs], axis=0)
        aux = T.mean(T.stack([a for _, a in outs]))
        comm = sum(r.bytes for r in group.comm_log)
    return cross_entropy(logits, packed.labels), aux, comm


def train(cfg: RunConfig, out_dir=None, write_files: bool = True) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps; writes metrics, curves and a checkpoint under ``out_dir``."""
    mcfg = cfg.model_config()
    model = Model.init(mcfg, seed=cfg.seed)
    task = make_task(cfg)
    opt = Adam(weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    out = Path(out_dir) if out_dir is not None else resolve_out(cfg.out_dir)
    writer = MetricsWriter(out / "metrics.jsonl") if write_files else None
    losses, records = [], []
    window_tokens, window_start, window_comm = 0, time.perf_counter(), 0
    for step in range(cfg.steps):
        packed = task.next_batch()
        try:
            with Tape() as tape:
                ce, aux, comm = _loss(model, packed, cfg.sp)
                loss = ce + aux * mcfg.aux_loss_weight if mcfg.aux_loss_weight else ce
            tape.backward(loss)
            if not np.isfinite(loss.item()):
                raise NonFiniteError("loss is not finite", op="loss")
        except (NonFiniteError, DegenerateNormalizerError) as err:
            raise TrainingDiverged(step, err) from err
        model = model.with_params(opt.step(model.params, cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup)))
        losses.append(ce.item())
        window_tokens += len(packed.tokens)
        window_comm += comm
        if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.steps:
            elapsed = max(time.perf_counter() - window_start, 1e-9)
            rec = MetricsRecord(step + 1, ce.item(), aux.item(), window_tokens / elapsed,
                                memory_elements(mcfg, int(packed.lengths.max())), window_comm)
            records.append(rec)
            if writer:
                writer.write(rec)
            window_tokens, window_start, window_comm = 0, time.perf_counter(), 0
    evaluation = task.evaluate(model)
    result = TrainResult(model, losses, records, evaluation)
    if write_files:
        result.out_dir = out
        result.files = {
            "metrics": writer.path,
            "curve": write_curve(out / "loss_curve.txt", range(1, len(losses) + 1), losses, ("step", "loss")),
            "checkpoint": save_checkpoint(out / "checkpoint.npz", model, cfg.steps),
        }
        summary = {"final_loss": losses[-1], "initial_loss": losses[0], "params": model.num_params(),
                   "pattern": mcfg.pattern, "lsm": mcfg.lsm, **evaluation}
        result.files["summary"] = out / "summary.json"
        result.files["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    return result
