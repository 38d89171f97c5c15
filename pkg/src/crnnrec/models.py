"""Contextual recurrent next-item models and their non-sequential baselines.

Shapes follow a row convention: a batch of B vectors is a (B, d) matrix and
weights multiply from the right, so a gate block computes
``[x; h] @ W`` with ``W`` of shape (input_dim + k, k).

Parameter names
---------------
``V``              item embeddings (n_items, N), used for input and output
``C_in``/``C_out`` context projections for multiplicative integration
``D``              context-to-logit block for concatenated output context
``W_u W_r W_h``    GRU gate matrices; ``b_u b_r b_h`` their biases
``U_u U_r U_h``    context projections of the context-wrapper cell
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernel as K
from .errors import ConfigurationError, DimensionError, VocabularyError

CELLS = ("covisit", "bag-of-items", "gru", "context-wrapper-gru")
INTEGRATIONS = ("none", "concat", "mult", "concat-mult")
MULT_KINDS = ("mult", "concat-mult")
CONCAT_KINDS = ("concat", "concat-mult")

# named configurations from the experiments
PRESETS = {
    "covisit": dict(cell="covisit"),
    "bag-of-items": dict(cell="bag-of-items"),
    "gru": dict(cell="gru"),
    "mult-gru": dict(cell="gru", input_integration="mult", output_integration="mult"),
    "concat-gru": dict(cell="gru", input_integration="concat", output_integration="concat"),
    "concat-mult-gru": dict(cell="gru", input_integration="concat-mult",
                            output_integration="concat-mult"),
    "concat-mult-context": dict(cell="context-wrapper-gru", input_integration="concat-mult",
                                output_integration="concat-mult"),
}


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    context_dim: int = 0
    cell: str = "gru"
    input_integration: str = "none"
    output_integration: str = "none"
    embed_dim: int = 100
    hidden_dim: int = 100
    share_context_projection: bool = False
    context_blocks: int = 1  # active entries per context vector, used to initialize projections

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ConfigurationError(f"unknown cell {self.cell!r}; expected one of {CELLS}")
        for side in ("input_integration", "output_integration"):
            if getattr(self, side) not in INTEGRATIONS:
                raise ConfigurationError(f"unknown {side} {getattr(self, side)!r}")
        if self.embed_dim != self.hidden_dim:
            raise ConfigurationError("tied embeddings need embed_dim == hidden_dim "
                                     f"(got {self.embed_dim} and {self.hidden_dim})")
        needs_context = (self.cell == "context-wrapper-gru" or self.input_integration != "none"
                         or self.output_integration != "none")
        if needs_context and self.context_dim <= 0:
            raise ConfigurationError("context integration requested but context_dim is 0")
        if self.cell in ("covisit", "bag-of-items") and self.input_integration in CONCAT_KINDS:
            raise ConfigurationError(f"{self.cell} uses the input as its state; "
                                     "concatenated input would change the state size")
        if self.share_context_projection and not (self.input_integration in MULT_KINDS
                                                  and self.output_integration in MULT_KINDS):
            raise ConfigurationError("share_context_projection needs multiplicative "
                                     "integration on both sides")
        if self.n_items < 1:
            raise ConfigurationError("n_items must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        try:
            return cls(**PRESETS[name], **kw)
        except KeyError:
            raise ConfigurationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None

    @property
    def input_dim(self) -> int:
        """Width of the integrated input x_t^c."""
        extra = self.context_dim if self.input_integration in CONCAT_KINDS else 0
        return self.embed_dim + extra

    @property
    def is_recurrent(self) -> bool:
        return self.cell in ("gru", "context-wrapper-gru")

    def param_shapes(self) -> dict[str, tuple[int, int] | tuple[int]]:
        n, k, vc = self.embed_dim, self.hidden_dim, self.context_dim
        shapes = {"V": (self.n_items, n)}
        if self.input_integration in MULT_KINDS:
            shapes["C_in"] = (vc, n)
        if self.output_integration in MULT_KINDS and not self.share_context_projection:
            shapes["C_out"] = (vc, k)
        if self.output_integration in CONCAT_KINDS:
            shapes["D"] = (vc, self.n_items)
        if self.is_recurrent:
            for g in "urh":
                shapes[f"W_{g}"] = (self.input_dim + k, k)
                shapes[f"b_{g}"] = (k,)
        if self.cell == "context-wrapper-gru":
            for g in "urh":
                shapes[f"U_{g}"] = (vc, k)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, and context projections that
    start close to producing all-ones (so multiplicative terms start near
    the identity)."""
    params = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        elif name[0] in "CU":
            base = 1.0 / config.context_blocks
            params[name] = (base * (1.0 + rng.uniform(-0.1, 0.1, size=shape))).astype(dtype)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return params


def bind(tape: K.Tape, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, K.Var]:
    """Put every parameter on ``tape`` without copying. With ``trainable``
    false they enter as constants and no backward closures are recorded."""
    if trainable:
        return {name: tape.param(name, value) for name, value in params.items()}
    return {name: tape.const(value) for name, value in params.items()}


# -- building blocks -------------------------------------------------------

def embed_item(V: K.Var, item_ids, n_items: int | None = None) -> K.Var:
    """Rows of the embedding matrix, i.e. ``V x_t`` for one-hot ``x_t``."""
    ids = np.atleast_1d(np.asarray(item_ids))
    n = V.shape[0] if n_items is None else n_items
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise VocabularyError(f"item id outside [0, {n})")
    return K.take_rows(V, ids)


def integrate_input(x: K.Var, c: K.Var, kind: str, p: dict[str, K.Var]) -> K.Var:
    if kind == "none":
        return x
    if kind == "concat":
        return K.concat([x, c])
    if "C_in" not in p:
        raise ConfigurationError(f"{kind} input integration needs C_in")
    gated = K.mul(x, K.matmul(c, p["C_in"]))
    return gated if kind == "mult" else K.concat([gated, c])


def integrate_output(h: K.Var, c: K.Var, kind: str, p: dict[str, K.Var],
                     Vt: K.Var | None = None) -> K.Var:
    """Logits over items for state ``h`` and the target event's context ``c``.

    Item logits always come from the tied embedding; concatenated context
    adds ``c @ D`` on top.
    """
    Vt = K.transpose(p["V"]) if Vt is None else Vt
    if kind in MULT_KINDS:
        C = p.get("C_out", p.get("C_in"))  # C_in when the projection is shared
        if C is None:
            raise ConfigurationError(f"{kind} output integration needs C_out")
        h = K.mul(h, K.matmul(c, C))
    logits = K.matmul(h, Vt)
    if kind in CONCAT_KINDS:
        if "D" not in p:
            raise ConfigurationError(f"{kind} output integration needs D")
        logits = K.add(logits, K.matmul(c, p["D"]))
    return logits


def _check_gru_input(x: K.Var, h: K.Var, W: K.Var) -> None:
    if x.shape[-1] + h.shape[-1] != W.shape[0] or h.shape[-1] != W.shape[1]:
        raise DimensionError(f"gru: input {x.shape} and state {h.shape} do not fit W {W.shape}")


def gru_step(x: K.Var, h: K.Var, p: dict[str, K.Var]) -> K.Var:
    _check_gru_input(x, h, p["W_u"])
    xh = K.concat([x, h])
    u = K.sigmoid(K.add_bias(K.matmul(xh, p["W_u"]), p["b_u"]))
    r = K.sigmoid(K.add_bias(K.matmul(xh, p["W_r"]), p["b_r"]))
    cand = K.tanh(K.add_bias(K.matmul(K.concat([x, K.mul(h, r)]), p["W_h"]), p["b_h"]))
    return K.add(K.mul(K.sub(1.0, u), h), K.mul(u, cand))


def context_wrapper_gru_step(x: K.Var, h: K.Var, c: K.Var, p: dict[str, K.Var]) -> K.Var:
    """GRU whose gate pre-activations ``W[x; h]`` are rescaled element-wise
    by ``c @ U`` before the bias is added."""
    _check_gru_input(x, h, p["W_u"])
    xh = K.concat([x, h])

    def block(inp, g):
        return K.add_bias(K.mul(K.matmul(inp, p[f"W_{g}"]), K.matmul(c, p[f"U_{g}"])), p[f"b_{g}"])

    u = K.sigmoid(block(xh, "u"))
    r = K.sigmoid(block(xh, "r"))
    cand = K.tanh(block(K.concat([x, K.mul(h, r)]), "h"))
    return K.add(K.mul(K.sub(1.0, u), h), K.mul(u, cand))


def baseline_step(kind: str, x: K.Var, h: K.Var) -> K.Var:
    if x.shape != h.shape:
        raise DimensionError(f"{kind}: input {x.shape} and state {h.shape} differ")
    if kind == "covisit":
        return x
    if kind == "bag-of-items":
        return K.add(h, x)
    raise ConfigurationError(f"{kind!r} is not a baseline cell")


def recurrent_step(config: ModelConfig, x: K.Var, h: K.Var, c: K.Var, p: dict[str, K.Var]) -> K.Var:
    if config.cell == "gru":
        return gru_step(x, h, p)
    if config.cell == "context-wrapper-gru":
        return context_wrapper_gru_step(x, h, c, p)
    return baseline_step(config.cell, x, h)


# -- whole sequences -------------------------------------------------------

def forward(config: ModelConfig, p: dict[str, K.Var], items: np.ndarray, contexts: np.ndarray,
            mask: np.ndarray | None = None):
    """Run a padded batch through the model.

    ``items`` is (B, T) item indices, ``contexts`` the dense (B, T, V_c)
    context rows (ignored when ``context_dim`` is 0), ``mask`` (B, T-1)
    marks valid prediction steps. Step t consumes event t and predicts
    event t+1 using event t+1's context at the output.

    Returns ``(logits, loss)``: a list of T-1 (B, n_items) logit variables
    and the masked sum of negative log-likelihoods.
    """
    tape = p["V"].tape
    items = np.asarray(items)
    B, T = items.shape
    if T < 2:
        raise ValueError("sequences need at least 2 events to define a prediction")
    if mask is None:
        mask = np.ones((B, T - 1))
    use_ctx = config.context_dim > 0
    if use_ctx and contexts.shape != (B, T, config.context_dim):
        raise DimensionError(f"contexts must be {(B, T, config.context_dim)}, got {contexts.shape}")
    Vt = K.transpose(p["V"])
    h = tape.const(np.zeros((B, config.hidden_dim), dtype=tape.dtype))
    c_next = tape.const(contexts[:, 0]) if use_ctx else None
    logits, losses = [], []
    for t in range(T - 1):
        c = c_next
        x = integrate_input(embed_item(p["V"], items[:, t], config.n_items), c,
                            config.input_integration, p)
        h = recurrent_step(config, x, h, c, p)
        c_next = tape.const(contexts[:, t + 1]) if use_ctx else None
        o = integrate_output(h, c_next, config.output_integration, p, Vt)
        logits.append(o)
        losses.append(K.softmax_cross_entropy(o, items[:, t + 1], mask[:, t]))
    loss = losses[0]
    for extra in losses[1:]:
        loss = K.add(loss, extra)
    return logits, loss


def forward_sequence(config: ModelConfig, params: dict[str, np.ndarray], items, contexts=None,
                     dtype=np.float64):
    """Per-step logits (T-1, n_items) and total NLL for a single session."""
    items = np.asarray(items)[None, :]
    if contexts is not None:
        contexts = np.asarray(contexts)[None]
    tape = K.Tape(dtype)
    logits, loss = forward(config, bind(tape, params), items, contexts)
    return np.concatenate([o.value for o in logits], axis=0), float(loss.value)


def topk_from_logits(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties broken by ascending index."""
    logits = np.asarray(logits)
    if k > logits.shape[-1]:
        raise ValueError(f"k={k} exceeds the number of items {logits.shape[-1]}")
    order = np.lexsort((np.arange(logits.shape[-1]), -logits))
    return order[:k]


def target_rank(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Zero-based position of each row's target in the ranking produced by
    :func:`topk_from_logits`; the target is in the top K iff rank < K."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    rows = np.arange(logits.shape[0])
    t = logits[rows, targets][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    return ((logits > t) | ((logits == t) & (idx < targets[:, None]))).sum(axis=1)


def predict_topk(config: ModelConfig, params: dict[str, np.ndarray], h: np.ndarray,
                 c_next: np.ndarray | None, k: int):
    """Top-k items and their probabilities for a state and next context."""
    tape = K.Tape(np.asarray(h).dtype)
    p = bind(tape, params)
    c = tape.const(np.atleast_2d(c_next)) if c_next is not None else None
    logits = integrate_output(tape.const(np.atleast_2d(h)), c, config.output_integration, p).value[0]
    top = topk_from_logits(logits, k)
    return top, K.softmax(logits)[top]


def final_state(config: ModelConfig, params: dict[str, np.ndarray], items, contexts=None,
                dtype=np.float64) -> np.ndarray:
    """Hidden state after consuming every event of a session."""
    tape = K.Tape(dtype)
    p = bind(tape, params)
    h = tape.const(np.zeros((1, config.hidden_dim), dtype=dtype))
    for t, item in enumerate(items):
        c = tape.const(np.asarray(contexts[t])[None]) if config.context_dim else None
        x = integrate_input(embed_item(p["V"], [item], config.n_items), c, config.input_integration, p)
        h = recurrent_step(config, x, h, c, p)
    return h.value[0]
