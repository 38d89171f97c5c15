"""Dense reverse-mode differentiation over numpy arrays, plus Adam.

Every value produced inside a forward pass is a :class:`Var` owned by a
:class:`Tape`. The tape keeps variables in creation order, so walking it
backwards visits each node only after every node that consumed it.

Example::

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    loss = sum_all(w)
    grads = backward(tape, loss)   # {"w": ones((2, 2))}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Tape", "Var", "matmul", "add", "sub", "mul", "sigmoid", "tanh",
    "elementwise", "add_bias", "concat", "take_rows", "transpose",
    "sum_all", "scale", "softmax", "log_softmax", "softmax_cross_entropy",
    "backward", "AdamState", "adam_step",
]


class Var:
    """A node on the tape: a value, its accumulated gradient, and how to push
    that gradient into its parents."""

    __slots__ = ("value", "grad", "name", "tape", "requires_grad", "_backward")

    def __init__(self, tape: "Tape", value: np.ndarray, requires_grad: bool,
                 name: str | None = None):
        self.tape = tape
        self.value = value
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # never mutate in place: the same array may be handed to several parents
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Ordered record of every variable created during one forward pass."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a differentiable leaf. ``value`` is used without copying
        when it already has the tape's dtype."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        v = Var(self, value, True, name)
        self.nodes.append(v)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        v = Var(self, np.asarray(value, dtype=self.dtype), False)
        self.nodes.append(v)
        return v

    def _node(self, value, parents: Sequence[Var], fn) -> Var:
        v = Var(self, value, any(p.requires_grad for p in parents))
        if v.requires_grad:
            v._backward = fn
        self.nodes.append(v)
        return v


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Var):
            return op.tape
    raise TypeError("at least one operand must be a Var")


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.const(x)


def _is_scalar(v: Var) -> bool:
    return v.value.ndim == 0


def _check_same(opname: str, a: Var, b: Var) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: np.ndarray, v: Var) -> np.ndarray:
    # scalar operand broadcast against a matrix: its gradient is the total
    return np.asarray(g.sum()) if _is_scalar(v) and g.ndim else g


def matmul(a: Var, b: Var) -> Var:
    """Matrix product; rank-3 operands are treated as a batch of matrices."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.value.ndim == 3 and b.value.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes of {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value

    def fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
            a._accumulate(ga.sum(axis=0) if ga.ndim > av.ndim else ga)
        if b.requires_grad:
            gb = np.swapaxes(av, -1, -2) @ g
            b._accumulate(gb.sum(axis=0) if gb.ndim > bv.ndim else gb)

    return tape._node(av @ bv, (a, b), fn)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_same("add", a, b)

    def fn(g):
        a._accumulate(_reduce_to(g, a))
        b._accumulate(_reduce_to(g, b))

    return tape._node(a.value + b.value, (a, b), fn)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_same("sub", a, b)

    def fn(g):
        a._accumulate(_reduce_to(g, a))
        b._accumulate(_reduce_to(-g, b))

    return tape._node(a.value - b.value, (a, b), fn)


def mul(a, b) -> Var:
    """Element-wise (Hadamard) product."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_same("mul", a, b)
    av, bv = a.value, b.value

    def fn(g):
        a._accumulate(_reduce_to(g * bv, a))
        b._accumulate(_reduce_to(g * av, b))

    return tape._node(av * bv, (a, b), fn)


def scale(a: Var, s: float) -> Var:
    return mul(a, float(s))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Var) -> Var:
    s = _stable_sigmoid(a.value)

    def fn(g):
        a._accumulate(g * s * (1.0 - s))

    return a.tape._node(s, (a,), fn)


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)

    def fn(g):
        a._accumulate(g * (1.0 - t * t))

    return a.tape._node(t, (a,), fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *operands) -> Var:
    """Dispatch by name to one of ``add``, ``sub``, ``mul``, ``sigmoid``, ``tanh``."""
    try:
        return _ELEMENTWISE[op](*operands)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


def add_bias(x: Var, b: Var) -> Var:
    """Add a length-k vector to every row of an (n, k) matrix."""
    tape = _tape_of(x, b)
    x, b = _lift(x, tape), _lift(b, tape)
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} are incompatible")

    def fn(g):
        x._accumulate(g)
        b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return tape._node(x.value + b.value, (x, b), fn)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            p._accumulate(piece)

    return tape._node(value, parts, fn)


def take_rows(table: Var, ids: np.ndarray) -> Var:
    """Select rows of ``table``; the gradient lands only on the selected rows."""
    ids = np.asarray(ids, dtype=np.intp)
    value = table.value[ids]

    def fn(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return table.tape._node(value, (table,), fn)


def transpose(a: Var) -> Var:
    def fn(g):
        a._accumulate(g.T)

    return a.tape._node(a.value.T, (a,), fn)


def sum_all(a: Var) -> Var:
    def fn(g):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return a.tape._node(np.asarray(a.value.sum()), (a,), fn)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    _check_finite(logits, "log_softmax")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probabilities along the last axis, computed after max-subtraction."""
    logits = np.asarray(logits)
    _check_finite(logits, "softmax")
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, targets: np.ndarray, mask: np.ndarray | None = None) -> Var:
    """Sum over rows of ``-mask[i] * log softmax(logits[i])[targets[i]]``.

    Rows with zero mask contribute exactly zero value and zero gradient.
    """
    lv = logits.value
    if lv.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {lv.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.ones(lv.shape[0], dtype=lv.dtype) if mask is None else np.asarray(mask, dtype=lv.dtype)
    if targets.shape != (lv.shape[0],) or mask.shape != (lv.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {lv.shape}, targets {targets.shape}, mask {mask.shape}")
    logp = log_softmax(lv)
    rows = np.arange(lv.shape[0])
    nll = -logp[rows, targets]
    value = np.asarray(np.sum(np.where(mask != 0, nll * mask, 0.0)), dtype=lv.dtype)

    def fn(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        d *= (mask * g)[:, None]
        logits._accumulate(d)

    return logits.tape._node(value, (logits,), fn)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse-accumulate from a scalar ``loss``; returns one gradient per
    registered parameter, zeros for those the loss does not reach."""
    if loss.value.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    return {
        name: np.zeros_like(v.value) if v.grad is None else np.array(v.grad, dtype=v.value.dtype)
        for name, v in tape.params.items()
    }


@dataclass
class AdamState:
    """Per-parameter moment buffers for Adam."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Gradients and the updated values are all checked before anything is
    written, so a step that would produce a non-finite number leaves both
    parameters and state untouched.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    pending = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new = p - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"adam_step: update makes parameter {name!r} non-finite")
        pending[name] = (m, v, new)
    for name, (m, v, new) in pending.items():
        state.m[name][...] = m
        state.v[name][...] = v
        params[name][...] = new
    state.step = step
    return params, state
