"""Discretized context features and their one-hot block encoding.

An event's context is the concatenation of one-hot blocks, in a fixed
order: month, hour, day of week, time-since-previous-event bucket and event
type. Any block may be disabled. A :class:`ContextVector` stores only the
active index of each enabled block; :meth:`ContextSchema.dense` materializes
the 0/1 matrix the model consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Mapping, Sequence

import numpy as np

from .errors import ContextError

FEATURES = ("month", "hour", "dow", "time_delta", "event_type")
MAX_DELTA_BUCKET = 20

# reserved slot past the regular buckets, used when first_event_bucket is on
FIRST_EVENT_SLOT = MAX_DELTA_BUCKET + 1


def bucket_time_delta(delta_seconds: float) -> int:
    """``min(floor(log2(delta + 1)), 20)`` for a non-negative gap in seconds."""
    if delta_seconds < 0:
        raise ContextError(f"negative time delta {delta_seconds}")
    d = int(delta_seconds)
    # bit_length of (d + 1) is floor(log2(d + 1)) + 1, exact for any integer
    return min((d + 1).bit_length() - 1, MAX_DELTA_BUCKET)


def encode_time(timestamp: float, utc_offset_hours: float = 0.0) -> tuple[int, int, int]:
    """Return ``(month, hour, day_of_week)`` as zero-based indices.

    Day of week counts from Monday = 0. The calendar is read at a fixed
    offset from UTC.
    """
    try:
        tz = timezone(timedelta(hours=utc_offset_hours))
        dt = datetime.fromtimestamp(float(timestamp), tz)
    except (OverflowError, OSError, ValueError) as exc:
        raise ContextError(f"timestamp {timestamp!r} outside supported range: {exc}") from None
    return dt.month - 1, dt.hour, dt.weekday()


def encode_event_type(event_type: str, vocab: Mapping[str, int]) -> int:
    """Index of ``event_type``; unknown types map to ``len(vocab)``."""
    return vocab.get(event_type, len(vocab))


@dataclass(frozen=True)
class ContextVector:
    """Global (schema-wide) active index per enabled block."""

    indices: tuple[int, ...]


@dataclass(frozen=True)
class ContextSchema:
    """Which feature blocks are enabled, and in what order they are laid out.

    Parameters
    ----------
    event_types:
        Event type names, in index order.
    features:
        Enabled blocks; any subset of :data:`FEATURES`. Order is always the
        canonical one regardless of the order given here.
    utc_offset_hours:
        Fixed offset used when reading month, hour and weekday.
    first_event_bucket:
        Give the first event of a session its own 22nd time-delta slot
        instead of sharing bucket 0.
    event_type_oov:
        Reserve one extra event-type slot for types missing from
        ``event_types``.
    """

    event_types: tuple[str, ...] = ("view", "sale")
    features: tuple[str, ...] = FEATURES
    utc_offset_hours: float = 0.0
    first_event_bucket: bool = False
    event_type_oov: bool = False
    _type_index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ContextError(f"unknown context features {sorted(unknown)}")
        object.__setattr__(self, "features", tuple(f for f in FEATURES if f in self.features))
        object.__setattr__(self, "event_types", tuple(self.event_types))
        object.__setattr__(self, "_type_index", {t: i for i, t in enumerate(self.event_types)})

    def cardinality(self, feature: str) -> int:
        if feature == "month":
            return 12
        if feature == "hour":
            return 24
        if feature == "dow":
            return 7
        if feature == "time_delta":
            return MAX_DELTA_BUCKET + 1 + int(self.first_event_bucket)
        if feature == "event_type":
            return len(self.event_types) + int(self.event_type_oov)
        raise ContextError(f"unknown context feature {feature!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(self.cardinality(f) for f in self.features)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum((0,) + self.sizes[:-1]))

    @property
    def dim(self) -> int:
        """Total one-hot width (V_c)."""
        return sum(self.sizes)

    @property
    def n_blocks(self) -> int:
        return len(self.features)

    def event_type_index(self, event_type) -> int:
        """Accept a name or an already-encoded integer index."""
        if isinstance(event_type, (int, np.integer)):
            idx = int(event_type)
        else:
            idx = encode_event_type(event_type, self._type_index)
        if idx >= self.cardinality("event_type") or idx < 0:
            raise ContextError(
                f"event type {event_type!r} not in {list(self.event_types)} and no OOV slot reserved")
        return idx

    def local_indices(self, timestamp: float, event_type, prev_timestamp: float | None) -> tuple[int, ...]:
        """Per-block indices, each within ``[0, cardinality)``."""
        values = {}
        if {"month", "hour", "dow"} & set(self.features):
            values["month"], values["hour"], values["dow"] = encode_time(timestamp, self.utc_offset_hours)
        if "time_delta" in self.features:
            if prev_timestamp is None:
                values["time_delta"] = FIRST_EVENT_SLOT if self.first_event_bucket else 0
            else:
                values["time_delta"] = bucket_time_delta(max(timestamp - prev_timestamp, 0))
        if "event_type" in self.features:
            values["event_type"] = self.event_type_index(event_type)
        return tuple(values[f] for f in self.features)

    def encode(self, timestamp: float, event_type, prev_timestamp: float | None) -> ContextVector:
        local = self.local_indices(timestamp, event_type, prev_timestamp)
        return ContextVector(tuple(o + i for o, i in zip(self.offsets, local)))

    def decode(self, cv: ContextVector) -> dict[str, int]:
        """Recover the per-feature discretized values from a vector."""
        if len(cv.indices) != self.n_blocks:
            raise ContextError(f"expected {self.n_blocks} active indices, got {len(cv.indices)}")
        out = {}
        for f, off, size, idx in zip(self.features, self.offsets, self.sizes, cv.indices):
            if not off <= idx < off + size:
                raise ContextError(f"index {idx} outside block {f!r} [{off}, {off + size})")
            out[f] = idx - off
        return out

    def encode_session(self, timestamps: Sequence[float], event_types: Sequence) -> np.ndarray:
        """Global active indices for every event of a session, shape (T, n_blocks)."""
        rows = []
        prev = None
        for ts, et in zip(timestamps, event_types):
            rows.append(self.encode(ts, et, prev).indices)
            prev = ts
        return np.asarray(rows, dtype=np.int64).reshape(len(rows), self.n_blocks)

    def dense(self, indices: np.ndarray, dtype=np.float64) -> np.ndarray:
        """One-hot rows for an integer array of shape (..., n_blocks)."""
        indices = np.asarray(indices)
        out = np.zeros(indices.shape[:-1] + (self.dim,), dtype=dtype)
        np.put_along_axis(out, indices, 1.0, axis=-1)
        return out

    def to_dict(self) -> dict:
        return {
            "event_types": list(self.event_types),
            "features": list(self.features),
            "utc_offset_hours": self.utc_offset_hours,
            "first_event_bucket": self.first_event_bucket,
            "event_type_oov": self.event_type_oov,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextSchema":
        return cls(
            event_types=tuple(d["event_types"]),
            features=tuple(d.get("features", FEATURES)),
            utc_offset_hours=float(d.get("utc_offset_hours", 0.0)),
            first_event_bucket=bool(d.get("first_event_bucket", False)),
            event_type_oov=bool(d.get("event_type_oov", False)),
        )


def build_context(timestamp: float, event_type, prev_event_timestamp: float | None,
                  schema: ContextSchema) -> ContextVector:
    """Context vector for one event; ``prev_event_timestamp`` is None for the
    first event of a session."""
    return schema.encode(timestamp, event_type, prev_event_timestamp)

