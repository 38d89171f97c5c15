"""Context-dependent Markov corpora with a known optimal Recall@K.

Generative process for one session of length L:

* the first item is drawn from ``initial``;
* every later event first draws its event type ``e`` from ``type_probs``
  (independently of everything else), then the item from
  ``transitions[e, previous_item]``;
* the gap to the previous event is log-uniform within ``gap_ranges[e]``.

Since the gap depends only on the event type, a model that sees the target
event's context learns nothing beyond ``(previous item, event type)``, and
the optimal predictor ranks ``transitions[e, prev]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Session
from .errors import InputError

DEFAULT_START = 1396310400.0  # 2014-04-01T00:00:00Z


@dataclass
class SyntheticSpec:
    transitions: np.ndarray          # (n_types, n_items, n_items), rows sum to 1
    type_probs: np.ndarray           # (n_types,)
    initial: np.ndarray              # (n_items,)
    length_probs: np.ndarray         # P(L = l) for l = 0..max_len; zero below 2
    gap_ranges: np.ndarray           # (n_types, 2) seconds, log-uniform bounds
    event_types: tuple[str, ...] = ("view", "basket", "sale")
    start_time: float = DEFAULT_START
    span_seconds: float = 180 * 86400.0
    seed: int = 0
    min_information: float = 0.0     # nats; see context_information

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.type_probs = np.asarray(self.type_probs, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.length_probs = np.asarray(self.length_probs, dtype=np.float64)
        self.gap_ranges = np.asarray(self.gap_ranges, dtype=np.float64)
        self.event_types = tuple(self.event_types)
        self.validate()

    @property
    def n_items(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_types(self) -> int:
        return self.transitions.shape[0]

    @property
    def max_len(self) -> int:
        return len(self.length_probs) - 1

    def validate(self) -> None:
        t = self.transitions
        if t.ndim != 3 or t.shape[1] != t.shape[2] or t.shape[1] < 2:
            raise InputError(f"transitions must be (n_types, n, n) with n >= 2, got {t.shape}")
        if len(self.event_types) != t.shape[0]:
            raise InputError("one event type name per transition table required")
        for name, arr, axis in (("transitions", t, -1), ("type_probs", self.type_probs, -1),
                                ("initial", self.initial, -1), ("length_probs", self.length_probs, -1)):
            if np.any(arr < 0) or not np.allclose(arr.sum(axis=axis), 1.0, atol=1e-9):
                raise InputError(f"{name} must be non-negative and normalized")
        if self.type_probs.shape != (self.n_types,) or self.initial.shape != (self.n_items,):
            raise InputError("type_probs / initial have the wrong length")
        if self.length_probs.shape[0] < 3 or self.length_probs[:2].sum() > 0:
            raise InputError("sessions must have at least 2 events")
        if self.gap_ranges.shape != (self.n_types, 2) or np.any(self.gap_ranges[:, 0] < 1) \
                or np.any(self.gap_ranges[:, 1] < self.gap_ranges[:, 0]):
            raise InputError("gap_ranges must be (n_types, 2) with 1 <= low <= high")
        if self.min_information > 0 and context_information(self) <= self.min_information:
            raise InputError(f"event type carries {context_information(self):.4f} nats about the "
                             f"next item, below the required {self.min_information}")

    def to_dict(self) -> dict:
        return {
            "transitions": self.transitions.tolist(), "type_probs": self.type_probs.tolist(),
            "initial": self.initial.tolist(), "length_probs": self.length_probs.tolist(),
            "gap_ranges": self.gap_ranges.tolist(), "event_types": list(self.event_types),
            "start_time": self.start_time, "span_seconds": self.span_seconds, "seed": self.seed,
            "min_information": self.min_information,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mixture_transitions(spec: SyntheticSpec) -> np.ndarray:
    """Next-item distribution given only the previous item (type marginalized)."""
    return np.einsum("e,eij->ij", spec.type_probs, spec.transitions)


def context_information(spec: SyntheticSpec) -> float:
    """Mean over previous items of sum_e P(e) KL(P_e(.|i) || sum_e' P(e') P_e'(.|i)),
    i.e. the conditional mutual information between event type and next item."""
    mix = mixture_transitions(spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(spec.transitions > 0, spec.transitions / mix[None], 1.0)
        kl = np.sum(spec.transitions * np.log(ratio), axis=-1)       # (n_types, n_items)
    return float(np.mean(spec.type_probs @ kl))


def _length_weights(length_probs: np.ndarray) -> np.ndarray:
    # w[t] = P(L >= t + 1): probability a session has a target at position t (1-based t >= 1)
    survival = np.cumsum(length_probs[::-1])[::-1]
    return survival[2:]


def topk_mass(probs: np.ndarray, k: int) -> np.ndarray:
    """Sum of the k largest entries along the last axis."""
    k = min(k, probs.shape[-1])
    return -np.sort(-probs, axis=-1)[..., :k].sum(axis=-1)


def bayes_recall_at_k(spec: SyntheticSpec, k: int, use_event_type: bool = True) -> float:
    """Closed-form expected Recall@K of the optimal predictor, averaged over
    prediction events.

    With ``use_event_type`` the predictor knows the target's event type;
    without it, it sees only the item history.
    """
    if use_event_type:
        per_item = spec.type_probs @ topk_mass(spec.transitions, k)   # (n_items,)
    else:
        per_item = topk_mass(mixture_transitions(spec), k)
    mix = mixture_transitions(spec)
    weights = _length_weights(spec.length_probs)
    marginal = spec.initial.copy()
    total = 0.0
    for w in weights:
        total += w * float(marginal @ per_item)
        marginal = marginal @ mix
    return total / float(weights.sum())


def generate_synthetic(spec: SyntheticSpec, n_sessions: int, seed: int | None = None,
                       id_prefix: str = "s") -> list[Session]:
    """Sample ``n_sessions`` sessions; item and event-type fields are indices."""
    if n_sessions <= 0:
        raise InputError("n_sessions must be positive")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lengths = rng.choice(len(spec.length_probs), size=n_sessions, p=spec.length_probs)
    max_len = int(lengths.max())
    items = np.zeros((n_sessions, max_len), dtype=np.int64)
    types = np.zeros((n_sessions, max_len), dtype=np.int64)
    gaps = np.zeros((n_sessions, max_len))
    init_cdf = np.cumsum(spec.initial)
    cdf = np.cumsum(spec.transitions, axis=-1)
    cdf[..., -1] = 1.0
    items[:, 0] = np.minimum(np.searchsorted(init_cdf, rng.random(n_sessions), side="right"),
                             spec.n_items - 1)
    types[:, 0] = rng.choice(spec.n_types, size=n_sessions, p=spec.type_probs)
    for t in range(1, max_len):
        types[:, t] = rng.choice(spec.n_types, size=n_sessions, p=spec.type_probs)
        rows = cdf[types[:, t], items[:, t - 1]]                       # (n_sessions, n_items)
        u = rng.random(n_sessions)[:, None]
        items[:, t] = np.minimum((rows <= u).sum(axis=1), spec.n_items - 1)
        lo, hi = np.log(spec.gap_ranges[types[:, t]]).T
        gaps[:, t] = np.floor(np.exp(lo + (hi - lo) * rng.random(n_sessions)))
    starts = np.floor(spec.start_time + spec.span_seconds * rng.random(n_sessions))
    width = len(str(n_sessions - 1))
    sessions = []
    for i in range(n_sessions):
        n = int(lengths[i])
        ts = starts[i] + np.cumsum(gaps[i, :n])
        sessions.append(Session(f"{id_prefix}{i:0{width}d}", tuple(int(x) for x in items[i, :n]),
                                tuple(float(x) for x in ts), tuple(int(x) for x in types[i, :n])))
    return sessions


def empirical_transitions(sessions: Sequence[Session], n_items: int, n_types: int) -> np.ndarray:
    """Row-normalized transition counts indexed by (event type, prev, next)."""
    counts = np.zeros((n_types, n_items, n_items))
    for s in sessions:
        for t in range(1, len(s)):
            counts[s.event_types[t], s.items[t - 1], s.items[t]] += 1
    totals = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


# -- spec factories --------------------------------------------------------

def _lengths(min_len: int, max_len: int, mean_extra: float) -> np.ndarray:
    # geometric number of extra events past min_len, truncated at max_len
    p = np.zeros(max_len + 1)
    q = 1.0 / (1.0 + mean_extra)
    p[min_len:] = q * (1 - q) ** np.arange(max_len - min_len + 1)
    return p / p.sum()


def informative_spec(n_items: int = 100, event_types: Sequence[str] = ("view", "basket", "sale"),
                     type_probs: Sequence[float] = (0.5, 0.3, 0.2), n_favorites: int = 6,
                     favorite_mass: float = 0.9, max_len: int = 20, mean_length: float = 7.0,
                     seed: int = 0, min_information: float = 0.1) -> SyntheticSpec:
    """Every (event type, previous item) pair puts ``favorite_mass`` on its
    own random handful of next items, so the event type strongly changes
    which items are likely."""
    rng = np.random.default_rng(seed)
    n_types = len(event_types)
    trans = np.full((n_types, n_items, n_items), (1.0 - favorite_mass) / (n_items - n_favorites))
    for e in range(n_types):
        for i in range(n_items):
            fav = rng.choice(n_items, size=n_favorites, replace=False)
            trans[e, i, fav] = favorite_mass * rng.dirichlet(np.full(n_favorites, 2.0))
    gap_ranges = np.array([[2.0, 300.0], [5.0, 120.0], [30.0, 3600.0]] * n_types)[:n_types]
    return SyntheticSpec(trans, np.asarray(type_probs, dtype=float), np.full(n_items, 1.0 / n_items),
                         _lengths(2, max_len, mean_length - 2), gap_ranges, tuple(event_types),
                         seed=seed, min_information=min_information)


def uniform_spec(n_items: int = 100, event_types: Sequence[str] = ("view", "sale"),
                 max_len: int = 20, mean_length: float = 7.0, seed: int = 0) -> SyntheticSpec:
    n_types = len(event_types)
    trans = np.full((n_types, n_items, n_items), 1.0 / n_items)
    return SyntheticSpec(trans, np.full(n_types, 1.0 / n_types), np.full(n_items, 1.0 / n_items),
                         _lengths(2, max_len, mean_length - 2), np.tile([[1.0, 600.0]], (n_types, 1)),
                         tuple(event_types), seed=seed)


def deterministic_spec(n_items: int = 10, event_types: Sequence[str] = ("view", "sale"),
                       max_len: int = 20, seed: int = 0) -> SyntheticSpec:
    """Each (event type, previous item) has exactly one possible next item."""
    rng = np.random.default_rng(seed)
    n_types = len(event_types)
    trans = np.zeros((n_types, n_items, n_items))
    for e in range(n_types):
        trans[e, np.arange(n_items), rng.integers(n_items, size=n_items)] = 1.0
    return SyntheticSpec(trans, np.full(n_types, 1.0 / n_types), np.full(n_items, 1.0 / n_items),
                         _lengths(2, max_len, 5.0), np.tile([[1.0, 600.0]], (n_types, 1)),
                         tuple(event_types), seed=seed)
