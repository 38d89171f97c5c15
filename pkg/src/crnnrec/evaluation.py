"""Recall@K, session-level bootstrap intervals, projections and uplift."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernel as K
from .batching import encode_contexts, pad_batch
from .context import ContextSchema, bucket_time_delta
from .data import Session
from .errors import EvaluationError
from .models import ModelConfig, bind, forward, target_rank

AXES = ("event-type", "new-historical", "time-gap", "seq-length")
SEQ_LENGTH_BUCKETS = ((1, 1), (2, 2), (3, 3), (4, 4), (5, 9), (10, 19))


@dataclass(frozen=True)
class PredictionRecord:
    session_id: str
    step: int           # events seen before the prediction (prefix length)
    target: int
    rank: int           # zero-based rank of the target; hit@K iff rank < K
    event_type: int     # event type of the target event
    is_new: bool        # target absent from the preceding events of the session
    time_gap: int       # time-delta bucket of the target event


@dataclass
class PredictionRecords:
    """Column-wise storage for many :class:`PredictionRecord`."""

    session_id: np.ndarray
    step: np.ndarray
    target: np.ndarray
    rank: np.ndarray
    event_type: np.ndarray
    is_new: np.ndarray
    time_gap: np.ndarray

    FIELDS = ("session_id", "step", "target", "rank", "event_type", "is_new", "time_gap")

    def __post_init__(self):
        self.session_id = np.asarray(self.session_id, dtype=str)
        for name in self.FIELDS[1:]:
            setattr(self, name, np.asarray(getattr(self, name),
                                           dtype=bool if name == "is_new" else np.int64))
        if len({len(getattr(self, f)) for f in self.FIELDS}) > 1:
            raise EvaluationError("record columns differ in length")

    def __len__(self):
        return len(self.rank)

    @classmethod
    def from_list(cls, records: Sequence[PredictionRecord]) -> "PredictionRecords":
        return cls(*([getattr(r, f) for r in records] for f in cls.FIELDS))

    def to_list(self) -> list[PredictionRecord]:
        return [PredictionRecord(*(getattr(self, f)[i].item() for f in self.FIELDS))
                for i in range(len(self))]

    def subset(self, mask: np.ndarray) -> "PredictionRecords":
        return PredictionRecords(*(getattr(self, f)[mask] for f in self.FIELDS))

    def hits(self, k: int) -> np.ndarray:
        return self.rank < k

    def keys(self) -> np.ndarray:
        """Sort order by (session, step), used to align two record sets."""
        return np.lexsort((self.step, self.session_id))

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in self.FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecords":
        return cls(*(d[f] for f in cls.FIELDS))


def session_labels(session: Session) -> list[tuple[int, int, bool, int]]:
    """``(step, event_type, is_new, time_gap)`` for each target of a session."""
    out = []
    for j in range(1, len(session)):
        gap = bucket_time_delta(max(session.timestamps[j] - session.timestamps[j - 1], 0))
        out.append((j, int(session.event_types[j]), session.items[j] not in session.items[:j], gap))
    return out


def score(model: ModelConfig, params: dict[str, np.ndarray], sessions: Sequence[Session],
          schema: ContextSchema | None = None, batch_size: int = 512,
          dtype=np.float64) -> PredictionRecords:
    """Rank every target of every session under a frozen model."""
    if not sessions:
        raise EvaluationError("no sessions to score")
    schema = schema if model.context_dim else None
    contexts = encode_contexts(sessions, schema)
    order = sorted(range(len(sessions)), key=lambda i: len(sessions[i]))
    ranks = {}
    for start in range(0, len(order), batch_size):
        batch = pad_batch(sessions, contexts, order[start:start + batch_size], schema)
        tape = K.Tape(dtype)
        p = bind(tape, params, trainable=False)
        logits, _ = forward(model, p, batch.items, batch.dense_contexts(schema, dtype), batch.mask)
        for t, o in enumerate(logits):
            valid = batch.mask[:, t] > 0
            if not valid.any():
                continue
            r = target_rank(o.value[valid], batch.targets[valid, t])
            for i, rank in zip(batch.index[valid], r):
                ranks[(int(i), t + 1)] = int(rank)
    rows = []
    for i, s in enumerate(sessions):
        for step, et, new, gap in session_labels(s):
            rows.append(PredictionRecord(s.session_id, step, int(s.items[step]), ranks[(i, step)],
                                         et, new, gap))
    return PredictionRecords.from_list(rows)


# -- metrics ----------------------------------------------------------------

def recall_at_k(records: PredictionRecords, k: int) -> float:
    """Fraction of prediction events whose target ranks in the top ``k``."""
    if len(records) == 0:
        raise EvaluationError("recall of an empty record set")
    return float(np.mean(records.hits(k)))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _per_session(records: PredictionRecords, k: int):
    _, codes = np.unique(records.session_id, return_inverse=True)
    hits = np.bincount(codes, weights=records.hits(k).astype(float))
    counts = np.bincount(codes).astype(float)
    return hits, counts


def _percentile_interval(values: np.ndarray, level: float) -> tuple[float, float]:
    alpha = 100 * (1 - level) / 2
    lo, hi = np.percentile(values, [alpha, 100 - alpha])
    return float(lo), float(hi)


def bootstrap_ci(records: PredictionRecords, k: int, resamples: int = 30, level: float = 0.95,
                 rng=0) -> tuple[float, float]:
    """Percentile interval of Recall@K over session-level resamples."""
    if len(records) == 0:
        raise EvaluationError("bootstrap of an empty record set")
    rng = _rng(rng)
    hits, counts = _per_session(records, k)
    n = len(hits)
    draws = rng.integers(n, size=(resamples, n))
    values = hits[draws].sum(axis=1) / counts[draws].sum(axis=1)
    return _percentile_interval(values, level)


def _aligned(a: PredictionRecords, b: PredictionRecords):
    if len(a) != len(b):
        raise EvaluationError(f"record sets differ in size ({len(a)} vs {len(b)})")
    a, b = a.subset(a.keys()), b.subset(b.keys())
    if not (np.array_equal(a.session_id, b.session_id) and np.array_equal(a.step, b.step)
            and np.array_equal(a.target, b.target)):
        raise EvaluationError("record sets do not come from the same test set")
    return a, b


def paired_bootstrap_diff(a: PredictionRecords, b: PredictionRecords, k: int,
                          resamples: int = 30, level: float = 0.95, rng=0):
    """Recall@K of ``a`` minus that of ``b`` and a percentile interval for the
    difference, resampling sessions jointly for both."""
    a, b = _aligned(a, b)
    rng = _rng(rng)
    ha, counts = _per_session(a, k)
    hb, _ = _per_session(b, k)
    n = len(counts)
    draws = rng.integers(n, size=(resamples, n))
    tot = counts[draws].sum(axis=1)
    diffs = (ha[draws].sum(axis=1) - hb[draws].sum(axis=1)) / tot
    diff = recall_at_k(a, k) - recall_at_k(b, k)
    return (diff,) + _percentile_interval(diffs, level)


# -- projections -------------------------------------------------------------

def _bucket_labels(records: PredictionRecords, axis: str, event_types=None,
                   seq_buckets=SEQ_LENGTH_BUCKETS) -> np.ndarray:
    if axis == "event-type":
        if event_types:
            names = list(event_types) + ["<OOV>"]
            return np.array([names[min(e, len(names) - 1)] for e in records.event_type], dtype=object)
        return records.event_type.astype(object)
    if axis == "new-historical":
        return np.where(records.is_new, "new", "historical").astype(object)
    if axis == "time-gap":
        return records.time_gap.astype(object)
    if axis == "seq-length":
        labels = np.empty(len(records), dtype=object)
        labels[:] = f">{seq_buckets[-1][1]}"
        for lo, hi in seq_buckets:
            labels[(records.step >= lo) & (records.step <= hi)] = str(lo) if lo == hi else f"{lo}-{hi}"
        return labels
    raise EvaluationError(f"unknown projection axis {axis!r}; expected one of {AXES}")


def _bucket_order(labels: np.ndarray, axis: str, seq_buckets=SEQ_LENGTH_BUCKETS,
                  event_types=None) -> list:
    present = list(dict.fromkeys(labels.tolist()))
    if axis == "seq-length":
        canon = [str(lo) if lo == hi else f"{lo}-{hi}" for lo, hi in seq_buckets] + [f">{seq_buckets[-1][1]}"]
        return [c for c in canon if c in present]
    if axis == "new-historical":
        return [c for c in ("new", "historical") if c in present]
    if axis == "event-type" and event_types:
        canon = list(event_types) + ["<OOV>"]
        return [c for c in canon if c in present]
    return sorted(present)


@dataclass
class ProjectionRow:
    bucket: object
    n: int
    volume: float
    recall: float
    ci_low: float
    ci_high: float


def project(records: PredictionRecords, axis: str, k: int, resamples: int = 30,
            level: float = 0.95, rng=0, event_types=None,
            seq_buckets=SEQ_LENGTH_BUCKETS) -> list[ProjectionRow]:
    """Per-bucket Recall@K, bootstrap interval and share of events.

    Buckets partition the records, so volumes sum to 1 and the
    volume-weighted recalls give back the overall recall.
    """
    if len(records) == 0:
        raise EvaluationError("projection of an empty record set")
    rng = _rng(rng)
    labels = _bucket_labels(records, axis, event_types, seq_buckets)
    rows = []
    for bucket in _bucket_order(labels, axis, seq_buckets, event_types):
        sub = records.subset(labels == bucket)
        lo, hi = bootstrap_ci(sub, k, resamples, level, rng)
        rows.append(ProjectionRow(bucket, len(sub), len(sub) / len(records),
                                  recall_at_k(sub, k), lo, hi))
    return rows


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    k: int
    n_events: int
    recall: float
    ci_low: float
    ci_high: float
    projections: dict[str, list[ProjectionRow]] = field(default_factory=dict)
    name: str = ""
    records: PredictionRecords | None = None
    resamples: int = 30
    level: float = 0.95
    event_types: tuple[str, ...] | None = None
    seq_buckets: tuple = SEQ_LENGTH_BUCKETS

    def to_dict(self, include_records: bool = True) -> dict:
        return {
            "name": self.name, "k": self.k, "n_events": self.n_events, "recall": self.recall,
            "ci_low": self.ci_low, "ci_high": self.ci_high, "resamples": self.resamples,
            "level": self.level,
            "event_types": list(self.event_types) if self.event_types else None,
            "seq_buckets": [list(b) for b in self.seq_buckets],
            "projections": {ax: [vars(r) for r in rows] for ax, rows in self.projections.items()},
            "records": self.records.to_dict() if include_records and self.records is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            k=d["k"], n_events=d["n_events"], recall=d["recall"], ci_low=d["ci_low"],
            ci_high=d["ci_high"],
            projections={ax: [ProjectionRow(**r) for r in rows] for ax, rows in d["projections"].items()},
            name=d.get("name", ""),
            records=PredictionRecords.from_dict(d["records"]) if d.get("records") else None,
            resamples=d.get("resamples", 30), level=d.get("level", 0.95),
            event_types=tuple(d["event_types"]) if d.get("event_types") else None,
            seq_buckets=tuple(tuple(b) for b in d.get("seq_buckets", SEQ_LENGTH_BUCKETS)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise EvaluationError(f"cannot read report {path}: {exc}") from None


def evaluate(records: PredictionRecords, k: int = 10, axes: Sequence[str] = AXES,
             resamples: int = 30, level: float = 0.95, seed: int = 0, name: str = "",
             event_types=None, seq_buckets=SEQ_LENGTH_BUCKETS) -> EvalReport:
    rng = np.random.default_rng(seed)
    lo, hi = bootstrap_ci(records, k, resamples, level, rng)
    projections = {ax: project(records, ax, k, resamples, level, rng, event_types, seq_buckets)
                   for ax in axes}
    return EvalReport(k, len(records), recall_at_k(records, k), lo, hi, projections, name,
                      records, resamples, level,
                      tuple(event_types) if event_types else None, tuple(seq_buckets))


def uplift_percent(a: float, b: float) -> float:
    """Relative improvement of ``a`` over ``b`` in percent."""
    if b == 0:
        raise EvaluationError("uplift over a zero baseline is undefined")
    return 100.0 * (a - b) / b


@dataclass
class UpliftCell:
    value: float
    baseline: float
    percent: float
    diff_low: float | None = None
    diff_high: float | None = None

    @property
    def significant(self) -> bool | None:
        if self.diff_low is None:
            return None
        return self.diff_low > 0 or self.diff_high < 0


def uplift(report: EvalReport, baseline: EvalReport, seed: int = 0) -> dict[str, UpliftCell]:
    """Per-cell uplift of ``report`` over ``baseline``.

    Cells are ``"overall"`` and ``"<axis>=<bucket>"``; the percentage is NaN
    where the baseline recall is zero. When both reports
    carry their records, each cell also gets a paired bootstrap interval of
    the recall difference, and is significant when it excludes zero.
    """
    if report.k != baseline.k:
        raise EvaluationError(f"reports use different K ({report.k} vs {baseline.k})")
    if report.n_events != baseline.n_events:
        raise EvaluationError("reports cover different test sets")
    paired = report.records is not None and baseline.records is not None
    rng = np.random.default_rng(seed)
    if paired:
        _aligned(report.records, baseline.records)
    cells = {}

    def cell(a_recs, b_recs, a, b):
        c = UpliftCell(a, b, uplift_percent(a, b) if b > 0 else float("nan"))
        if paired:
            _, c.diff_low, c.diff_high = paired_bootstrap_diff(a_recs, b_recs, report.k,
                                                               report.resamples, report.level, rng)
        return c

    cells["overall"] = cell(report.records, baseline.records, report.recall, baseline.recall)
    for axis, rows in report.projections.items():
        base_rows = {r.bucket: r for r in baseline.projections.get(axis, [])}
        if paired:
            la = _bucket_labels(report.records, axis, report.event_types, report.seq_buckets)
            lb = _bucket_labels(baseline.records, axis, report.event_types, report.seq_buckets)
        for row in rows:
            if row.bucket not in base_rows:
                continue
            sub_a = sub_b = None
            if paired:
                sub_a = report.records.subset(la == row.bucket)
                sub_b = baseline.records.subset(lb == row.bucket)
            cells[f"{axis}={row.bucket}"] = cell(sub_a, sub_b, row.recall, base_rows[row.bucket].recall)
    return cells


# -- text output --------------------------------------------------------------

def format_table(reports: Sequence[EvalReport], baseline: EvalReport | None = None) -> str:
    """Aligned model-by-recall table; uplift over ``baseline`` in parentheses."""
    width = max([len(r.name) for r in reports] + [5])
    k = reports[0].k
    lines = [f"{'Model':<{width}}  Recall@{k}  95% CI"]
    for r in reports:
        text = f"{r.recall:.3f}"
        if baseline is not None and r is not baseline:
            c = uplift(r, baseline)["overall"]
            flag = "*" if c.significant else ""
            text += f" ({c.percent:+.1f}%{flag})"
        lines.append(f"{r.name:<{width}}  {text:<18} [{r.ci_low:.3f}, {r.ci_high:.3f}]")
    return "\n".join(lines)


def format_projection(report: EvalReport, axis: str) -> str:
    rows = report.projections[axis]
    lines = [f"{axis:<16} {'n':>8} {'volume':>7} {'recall':>7}  95% CI"]
    for r in rows:
        lines.append(f"{str(r.bucket):<16} {r.n:>8d} {r.volume:>7.3f} {r.recall:>7.3f}  "
                     f"[{r.ci_low:.3f}, {r.ci_high:.3f}]")
    return "\n".join(lines)


def format_uplift(cells: dict[str, UpliftCell]) -> str:
    width = max(len(k) for k in cells)
    lines = [f"{'cell':<{width}}  {'model':>7} {'base':>7} {'uplift':>8}  diff 95% CI"]
    for name, c in cells.items():
        ci = "" if c.diff_low is None else f"[{c.diff_low:+.4f}, {c.diff_high:+.4f}]"
        flag = "*" if c.significant else ""
        pct = "n/a" if np.isnan(c.percent) else f"{c.percent:+.1f}%"
        lines.append(f"{name:<{width}}  {c.value:>7.3f} {c.baseline:>7.3f} {pct:>8}  {ci}{flag}")
    return "\n".join(lines)


def write_plot_data(report: EvalReport, directory) -> list[Path]:
    """One TSV per projection with columns x, y, ci_low, ci_high, volume."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for axis, rows in report.projections.items():
        path = directory / f"{axis}.tsv"
        body = "x\ty\tci_low\tci_high\tvolume\n" + "".join(
            f"{r.bucket}\t{r.recall!r}\t{r.ci_low!r}\t{r.ci_high!r}\t{r.volume!r}\n" for r in rows)
        path.write_text(body)
        paths.append(path)
    return paths
