"""Padded mini-batches of sessions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .context import ContextSchema
from .data import Session
from .errors import InputError


@dataclass
class Batch:
    """``items`` and ``contexts`` are right-padded to the longest session in
    the batch; ``mask[b, t]`` is 1 exactly when event t+1 of session b exists,
    i.e. when step t has a target."""

    items: np.ndarray        # (B, T) int
    contexts: np.ndarray     # (B, T, n_blocks) int, global one-hot indices
    targets: np.ndarray      # (B, T-1) int
    mask: np.ndarray         # (B, T-1) float
    index: np.ndarray        # (B,) position of each row's session in the source list
    lengths: np.ndarray      # (B,)

    def __len__(self):
        return len(self.items)

    def dense_contexts(self, schema: ContextSchema | None, dtype=np.float64) -> np.ndarray | None:
        if schema is None or schema.n_blocks == 0:
            return None
        return schema.dense(self.contexts, dtype)


def encode_contexts(sessions: Sequence[Session], schema: ContextSchema | None) -> list[np.ndarray]:
    if schema is None:
        return [np.zeros((len(s), 0), dtype=np.int64) for s in sessions]
    return [schema.encode_session(s.timestamps, s.event_types) for s in sessions]


def pad_batch(sessions: Sequence[Session], contexts: Sequence[np.ndarray], index: Sequence[int],
              schema: ContextSchema | None) -> Batch:
    idx = np.asarray(index, dtype=np.int64)
    lengths = np.array([len(sessions[i]) for i in idx])
    B, T = len(idx), int(lengths.max())
    n_blocks = schema.n_blocks if schema is not None else 0
    items = np.zeros((B, T), dtype=np.int64)
    # pad slots point at each block's first entry so the dense rows stay one-hot
    pad_ctx = np.asarray(schema.offsets if schema is not None else (), dtype=np.int64)
    ctx = np.broadcast_to(pad_ctx, (B, T, n_blocks)).copy()
    for row, i in enumerate(idx):
        n = lengths[row]
        items[row, :n] = sessions[i].items
        ctx[row, :n] = contexts[i]
    mask = (np.arange(1, T)[None, :] < lengths[:, None]).astype(np.float64)
    return Batch(items, ctx, items[:, 1:].copy(), mask, idx, lengths)


def make_batches(sessions: Sequence[Session], batch_size: int, rng: np.random.Generator,
                 schema: ContextSchema | None = None, epochs: int | None = None,
                 shuffle: bool = True) -> Iterator[Batch]:
    """Stream of batches, reshuffled every epoch; the last batch of an epoch
    may be smaller. Runs forever unless ``epochs`` is given."""
    if not sessions:
        raise InputError("cannot batch an empty corpus")
    short = [s.session_id for s in sessions if len(s) < 2]
    if short:
        raise InputError(f"{len(short)} sessions shorter than 2 events, e.g. {short[0]!r}")
    contexts = encode_contexts(sessions, schema)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(sessions)) if shuffle else np.arange(len(sessions))
        for start in range(0, len(order), batch_size):
            yield pad_batch(sessions, contexts, order[start:start + batch_size], schema)
        epoch += 1
