"""Mini-batch NLL training with Adam and a square-root learning-rate decay."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import kernel as K
from .batching import Batch, make_batches
from .context import ContextSchema
from .data import Corpus
from .evaluation import recall_at_k, score
from .errors import ConfigurationError, InputError, NumericError
from .models import ModelConfig, PRESETS, bind, forward, init_params

__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "lr_schedule", "make_batches",
           "batch_loss", "train", "model_config_for"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 10000
    lr_start: float = 0.01
    lr_end: float = 0.001
    embed_dim: int = 100
    hidden_dim: int = 100
    seed: int = 0
    precision: str = "float64"
    cell: str = "gru"
    input_integration: str = "none"
    output_integration: str = "none"
    share_context_projection: bool = False
    clip_norm: float | None = None
    eval_every: int = 0
    eval_k: int = 10

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigurationError("iterations must be positive")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError("need lr_start >= lr_end > 0")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError("precision must be float64 or float32")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")

    @classmethod
    def for_preset(cls, preset: str, **kw) -> "TrainConfig":
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[preset], **kw})

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(NumericError):
    def __init__(self, message, step, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainResult:
    model: ModelConfig
    params: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """``lr_start / sqrt(1 + (step / iterations) * ((lr_start / lr_end)**2 - 1))``.

    Equals ``lr_start`` at step 0 and ``lr_end`` at ``step == iterations``,
    decaying like ``1 / sqrt(step)`` in between.
    """
    if not 0 <= step <= config.iterations:
        raise ValueError(f"step {step} outside [0, {config.iterations}]")
    ratio2 = (config.lr_start / config.lr_end) ** 2
    if step == config.iterations:
        return config.lr_end
    return config.lr_start / math.sqrt(1.0 + (step / config.iterations) * (ratio2 - 1.0))


def model_config_for(config: TrainConfig, n_items: int, schema: ContextSchema | None) -> ModelConfig:
    return ModelConfig(
        n_items=n_items,
        context_dim=schema.dim if schema is not None else 0,
        cell=config.cell,
        input_integration=config.input_integration,
        output_integration=config.output_integration,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        share_context_projection=config.share_context_projection,
        context_blocks=max(schema.n_blocks, 1) if schema is not None else 1,
    )


def batch_loss(model: ModelConfig, params: dict[str, np.ndarray], batch: Batch,
               schema: ContextSchema | None, dtype=np.float64):
    """Mean NLL over valid targets, on a fresh tape.

    Returns ``(tape, mean_loss_var, total_nll, n_targets)``.
    """
    tape = K.Tape(dtype)
    p = bind(tape, params)
    ctx = batch.dense_contexts(schema if model.context_dim else None, dtype)
    _, total = forward(model, p, batch.items, ctx, batch.mask.astype(dtype))
    n = float(batch.mask.sum())
    return tape, K.scale(total, 1.0 / n), float(total.value), n


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def train(corpus: Corpus, config: TrainConfig, schema: ContextSchema | None = None,
          valid: Corpus | None = None, checkpoint_path=None, log_path=None,
          vocab=None, on_step=None, extra: dict | None = None) -> TrainResult:
    """Run ``config.iterations`` Adam steps on ``corpus``.

    ``schema`` may be None only for models that use no context. When
    ``valid`` is given and ``config.eval_every > 0``, Recall@``eval_k`` on it
    is added to the log every ``eval_every`` steps (logged only, never used
    to stop). ``on_step`` is called with each log record; ``extra`` is
    stored in the checkpoint next to the config. A non-finite loss raises :class:`TrainingDiverged` after
    writing the last good parameters to ``checkpoint_path``.
    """
    if not corpus.sessions:
        raise InputError("empty training corpus")
    model = model_config_for(config, corpus.n_items, schema)
    schema_used = schema if model.context_dim else None
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    dtype = config.dtype
    params = init_params(model, np.random.default_rng(seeds[0]), dtype)
    state = K.AdamState.for_params(params)
    stream = make_batches(corpus.sessions, config.batch_size, np.random.default_rng(seeds[1]), schema_used)

    def write_checkpoint(path):
        if path is not None:
            ckpt_io.save(path, ckpt_io.Checkpoint(
                model, params, schema, vocab if vocab is not None else corpus.vocab,
                corpus.event_types, {**config.to_dict(), **(extra or {})}))

    records = []
    log_fh = open(log_path, "w") if log_path is not None else None
    t0 = time.perf_counter()
    try:
        for step in range(config.iterations):
            batch = next(stream)
            lr = lr_schedule(step, config)
            try:
                tape, loss, total, n = batch_loss(model, params, batch, schema_used, dtype)
                if not math.isfinite(float(loss.value)):
                    raise NumericError(f"non-finite loss {float(loss.value)}")
            except NumericError as exc:
                write_checkpoint(checkpoint_path)
                raise TrainingDiverged(f"step {step}: {exc}", step, checkpoint_path) from exc
            grads = K.backward(tape, loss)
            rec = {"step": step, "lr": lr, "loss": float(loss.value), "loss_sum": total,
                   "n_targets": int(n)}
            if config.clip_norm is not None:
                rec["grad_norm"] = _clip(grads, config.clip_norm)
            try:
                K.adam_step(params, grads, state, lr)
            except NumericError as exc:
                write_checkpoint(checkpoint_path)
                raise TrainingDiverged(f"step {step}: {exc}", step, checkpoint_path) from exc
            if valid is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                recs = score(model, params, valid.sessions, schema_used, dtype=dtype)
                rec[f"valid_recall@{config.eval_k}"] = recall_at_k(recs, config.eval_k)
                log.info("step %d loss %.4f valid recall@%d %.4f", step, rec["loss"],
                         config.eval_k, rec[f"valid_recall@{config.eval_k}"])
            rec["wall_time"] = time.perf_counter() - t0
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        if log_fh is not None:
            log_fh.close()
    write_checkpoint(checkpoint_path)
    return TrainResult(model, params, records)


def final_loss(result: TrainResult, window: int = 20) -> float:
    """Mean of the last ``window`` logged batch losses."""
    tail = result.log[-window:]
    return float(np.mean([r["loss"] for r in tail]))

