"""Session corpora: YooChoose ingestion, preprocessing, splits and the
line-delimited canonical format."""
from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, VocabularyError

log = logging.getLogger(__name__)

OOV_TOKEN = "<OOV>"
EVENT_ORDER = {"view": 0, "sale": 1}
_ISO = re.compile(r"(\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2})(?:\.(\d+))?(Z|[+-]\d{2}:?\d{2})?")


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    timestamp: float
    item_id: str
    event_type: str


@dataclass(frozen=True)
class Session:
    """An ordered event sequence.

    Items and event types are external ids (strings) before encoding and
    dense integer indices after :meth:`Vocab.encode_session`.
    """

    session_id: str
    items: tuple
    timestamps: tuple[float, ...]
    event_types: tuple
    user_id: str | None = None

    def __post_init__(self):
        if not len(self.items) == len(self.timestamps) == len(self.event_types):
            raise InputError(f"session {self.session_id}: field lengths differ")

    def __len__(self):
        return len(self.items)

    @property
    def start(self) -> float:
        return self.timestamps[0]

    def tail(self, n: int) -> "Session":
        return Session(self.session_id, self.items[-n:], self.timestamps[-n:],
                       self.event_types[-n:], self.user_id)


@dataclass
class Vocab:
    """Bijective external-id <-> dense-index map with one reserved OOV index.

    The OOV slot sits right after the retained items, so ``size`` counts it.
    ``oov_index`` is None for vocabularies built without an OOV slot (the
    synthetic corpora).
    """

    items: list = field(default_factory=list)
    min_count: int = 1
    with_oov: bool = True

    def __post_init__(self):
        self._index = {it: i for i, it in enumerate(self.items)}
        if len(self._index) != len(self.items):
            raise InputError("vocabulary items must be unique")

    @classmethod
    def build(cls, sessions: Iterable[Session], min_count: int = 5) -> "Vocab":
        counts = Counter(it for s in sessions for it in s.items)
        counts.pop(OOV_TOKEN, None)
        kept = sorted((it for it, c in counts.items() if c >= min_count), key=str)
        return cls(kept, min_count)

    @property
    def oov_index(self) -> int | None:
        return len(self.items) if self.with_oov else None

    @property
    def size(self) -> int:
        return len(self.items) + int(self.with_oov)

    def __contains__(self, item):
        return item in self._index

    def encode(self, item) -> int:
        idx = self._index.get(item)
        if idx is not None:
            return idx
        if self.with_oov:
            return self.oov_index
        raise VocabularyError(f"item {item!r} not in vocabulary and no OOV slot")

    def decode(self, index: int):
        if 0 <= index < len(self.items):
            return self.items[index]
        if index == self.oov_index:
            return OOV_TOKEN
        raise VocabularyError(f"index {index} outside vocabulary of size {self.size}")

    def encode_session(self, session: Session, event_types: Sequence[str]) -> Session:
        type_index = {t: i for i, t in enumerate(event_types)}
        ets = tuple(type_index.get(e, len(type_index)) if not isinstance(e, (int, np.integer)) else int(e)
                    for e in session.event_types)
        return Session(session.session_id, tuple(self.encode(i) for i in session.items),
                       session.timestamps, ets, session.user_id)

    def to_dict(self) -> dict:
        return {"items": list(self.items), "min_count": self.min_count,
                "oov_index": self.oov_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["items"]), int(d.get("min_count", 1)), d.get("oov_index") is not None)


@dataclass
class Corpus:
    """Encoded sessions plus what is needed to interpret them."""

    sessions: list[Session]
    n_items: int
    event_types: tuple[str, ...]
    vocab: Vocab | None = None

    def __len__(self):
        return len(self.sessions)

    @property
    def n_predictions(self) -> int:
        return sum(len(s) - 1 for s in self.sessions)


# -- YooChoose -------------------------------------------------------------

@dataclass
class LoadReport:
    rows: int = 0
    malformed: int = 0
    malformed_examples: list = field(default_factory=list)

    @property
    def malformed_fraction(self) -> float:
        return self.malformed / self.rows if self.rows else 0.0


def parse_timestamp(text: str) -> float:
    """ISO-8601 with optional fractional seconds and trailing Z, read as UTC."""
    m = _ISO.fullmatch(text.strip())
    if m is None:
        raise ValueError(f"unparseable timestamp {text!r}")
    base, frac, tz = m.groups()
    dt = datetime.fromisoformat(base + (tz if tz and tz != "Z" else "+00:00"))
    return dt.timestamp() + (float("0." + frac) if frac else 0.0)


def _read_rows(path, min_fields: int, event_type: str, report: LoadReport):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            report.rows += 1
            try:
                if len(row) < min_fields:
                    raise ValueError(f"expected at least {min_fields} fields")
                sid, ts, item = row[0].strip(), parse_timestamp(row[1]), row[2].strip()
                if not sid or not item:
                    raise ValueError("empty session or item id")
            except ValueError as exc:
                report.malformed += 1
                if len(report.malformed_examples) < 5:
                    report.malformed_examples.append(f"{path}:{lineno}: {exc}")
                continue
            yield RawEvent(sid, ts, item, event_type)


def load_yoochoose(clicks_path, buys_path=None, max_malformed: float = 0.01):
    """Merge YooChoose clicks ("view") and buys ("sale") into sessions.

    Returns ``(sessions, report)``. Events within a session are ordered by
    timestamp, with a sale placed after a view at the same instant. Sessions
    are ordered by start time, then id.
    """
    report = LoadReport()
    events = list(_read_rows(clicks_path, 3, "view", report))
    if buys_path is not None:
        events += _read_rows(buys_path, 3, "sale", report)
    if report.malformed:
        log.warning("skipped %d malformed rows of %d: %s", report.malformed, report.rows,
                    "; ".join(report.malformed_examples))
    if report.malformed_fraction > max_malformed:
        raise InputError(f"{report.malformed} of {report.rows} rows malformed "
                         f"({100 * report.malformed_fraction:.1f}% > {100 * max_malformed:.1f}%)")
    by_session = defaultdict(list)
    for e in events:
        by_session[e.session_id].append(e)
    sessions = []
    for sid, evs in by_session.items():
        evs.sort(key=lambda e: (e.timestamp, EVENT_ORDER.get(e.event_type, 2)))
        sessions.append(Session(sid, tuple(e.item_id for e in evs),
                                tuple(e.timestamp for e in evs), tuple(e.event_type for e in evs)))
    sessions.sort(key=lambda s: (s.start, s.session_id))
    return sessions, report


# -- preprocessing ---------------------------------------------------------

def preprocess(sessions: Sequence[Session], min_count: int = 5, max_len: int = 20,
               vocab: Vocab | None = None):
    """Truncate to the last ``max_len`` events, drop sessions shorter than 2,
    and replace rare items with :data:`OOV_TOKEN`.

    Counting happens after truncation and filtering, which makes the
    operation idempotent. Pass the training ``vocab`` when processing
    held-out splits so that counts never leak from them.
    Returns ``(sessions, vocab)``.
    """
    kept = [s.tail(max_len) if len(s) > max_len else s for s in sessions]
    kept = [s for s in kept if len(s) >= 2]
    if not kept:
        raise InputError("no session with at least 2 events survives preprocessing")
    if vocab is None:
        vocab = Vocab.build(kept, min_count)
    out = [
        Session(s.session_id, tuple(i if i in vocab else OOV_TOKEN for i in s.items),
                s.timestamps, s.event_types, s.user_id)
        for s in kept
    ]
    return out, vocab


def encode_corpus(sessions: Sequence[Session], vocab: Vocab, event_types: Sequence[str]) -> Corpus:
    return Corpus([vocab.encode_session(s, event_types) for s in sessions],
                  vocab.size, tuple(event_types), vocab)


def item_x_event_type(corpus: Corpus) -> Corpus:
    """Re-key every item as the pair (item, event type).

    Used for the Cartesian-product baseline; the item space grows by a
    factor of the number of event types.
    """
    n_types = len(corpus.event_types)
    sessions = [
        Session(s.session_id, tuple(i * n_types + e for i, e in zip(s.items, s.event_types)),
                s.timestamps, s.event_types, s.user_id)
        for s in corpus.sessions
    ]
    return Corpus(sessions, corpus.n_items * n_types, corpus.event_types, None)


# -- splits ----------------------------------------------------------------

def split_by_time(sessions: Sequence[Session], valid_seconds: float, test_seconds: float):
    """Consecutive train / valid / test periods by session start time.

    The test period is the last ``test_seconds`` before the latest start;
    the validation period directly precedes it.
    """
    if valid_seconds <= 0 or test_seconds <= 0:
        raise InputError("holdout durations must be positive")
    end = max(s.start for s in sessions)
    test_from = end - test_seconds
    valid_from = test_from - valid_seconds
    train = [s for s in sessions if s.start < valid_from]
    valid = [s for s in sessions if valid_from <= s.start < test_from]
    test = [s for s in sessions if s.start >= test_from]
    return _check_parts(train, valid, test)


def split_by_holdout(sessions: Sequence[Session], valid_fraction: float = 0.2,
                     test_fraction: float = 0.2, seed: int = 0):
    """Hold out random users (or sessions, when there is no user id)."""
    if valid_fraction < 0 or test_fraction < 0 or valid_fraction + test_fraction >= 1:
        raise InputError("holdout fractions must be non-negative and sum below 1")
    keys = sorted({s.user_id if s.user_id is not None else s.session_id for s in sessions}, key=str)
    order = np.random.default_rng(seed).permutation(len(keys))
    n_valid = int(round(valid_fraction * len(keys)))
    n_test = int(round(test_fraction * len(keys)))
    valid_keys = {keys[i] for i in order[:n_valid]}
    test_keys = {keys[i] for i in order[n_valid:n_valid + n_test]}
    parts = ([], [], [])
    for s in sessions:
        k = s.user_id if s.user_id is not None else s.session_id
        parts[1 if k in valid_keys else 2 if k in test_keys else 0].append(s)
    return _check_parts(*parts)


def split(sessions: Sequence[Session], strategy: str, seed: int = 0, **params):
    """``strategy`` is ``"time"`` (``valid_seconds``, ``test_seconds``) or
    ``"holdout"`` (``valid_fraction``, ``test_fraction``)."""
    if strategy == "time":
        return split_by_time(sessions, **params)
    if strategy == "holdout":
        return split_by_holdout(sessions, seed=seed, **params)
    raise InputError(f"unknown split strategy {strategy!r}")


def _check_parts(train, valid, test):
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        if not part:
            raise InputError(f"{name} partition is empty")
    return train, valid, test


# -- canonical corpus format -----------------------------------------------

def write_corpus(corpus: Corpus, path, vocab_path=None) -> None:
    """Tab-separated ``session_id, ts, item_idx, event_type_idx`` lines and a
    JSON vocabulary sidecar (default: ``<path>.vocab.json``)."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in corpus.sessions:
            for item, ts, et in zip(s.items, s.timestamps, s.event_types):
                fh.write(f"{s.session_id}\t{ts!r}\t{item}\t{et}\n")
    side = {"n_items": corpus.n_items, "event_types": list(corpus.event_types),
            "vocab": corpus.vocab.to_dict() if corpus.vocab is not None else None}
    Path(vocab_path or f"{path}.vocab.json").write_text(json.dumps(side, indent=1))


def read_corpus(path, vocab_path=None) -> Corpus:
    path = Path(path)
    side_path = Path(vocab_path or f"{path}.vocab.json")
    try:
        side = json.loads(side_path.read_text())
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read corpus: {exc}") from None
    rows = defaultdict(list)
    order = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            sid, ts, item, et = parts[0], float(parts[1]), int(parts[2]), int(parts[3])
        except (IndexError, ValueError):
            raise InputError(f"{path}:{lineno}: expected session_id, ts, item_idx, event_type_idx") from None
        if sid not in rows:
            order.append(sid)
        rows[sid].append((ts, item, et))
    sessions = [Session(sid, tuple(r[1] for r in rows[sid]), tuple(r[0] for r in rows[sid]),
                        tuple(r[2] for r in rows[sid])) for sid in order]
    vocab = Vocab.from_dict(side["vocab"]) if side.get("vocab") else None
    return Corpus(sessions, int(side["n_items"]), tuple(side["event_types"]), vocab)
