"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Every numeric primitive the transformer needs lives here. Arrays are plain
numpy; the differentiation machinery (tape, backward rules) is our own.
Operations executed while a :class:`Tape` is active record a node with a
backward closure; ``backward(tape, loss)`` walks the tape once in reverse and
accumulates gradients into ``Tensor.grad``.

Design constraints honored throughout:
  * tape node order is creation order, which is automatically topological;
  * gradients accumulate across fan-out (a tensor used twice gets the sum);
  * identical inputs and seeds give bit-identical gradients (no threading,
    no nondeterministic reductions).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

# Additive mask value for attention: large enough that exp(x - rowmax)
# underflows to exactly 0, small enough to stay finite in float32.
MASK_VALUE = -1e30


class Tensor:
    """A dense numeric array with a gradient slot.

    ``data`` is a numpy array of any shape; ``grad`` (same shape) is filled in
    by :func:`backward`. ``requires_grad`` marks leaves whose gradients the
    caller wants; it propagates through operations so gradients flow through
    intermediates.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensor data must be numeric, got dtype {arr.dtype}")
        if arr.dtype.kind == "f" and dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Thin operator sugar; scalars and arrays are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


class TapeNode:
    """One recorded operation: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward_fn: Callable[[Array], tuple[Array | None, ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one training step.

    Node order is creation order, so every node's inputs precede it and a
    single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: Tape | None = None


def _record(op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
    if _ACTIVE_TAPE is not None and output.requires_grad:
        _ACTIVE_TAPE.nodes.append(TapeNode(op, inputs, output, backward_fn))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; python scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g: Array):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    _record("add", (a, b), out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g: Array):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    _record("mul", (a, b), out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics (leading dims broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g: Array):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    _record("matmul", (a, b), out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad)

    def bwd(g: Array):
        return ((g * (x.data > 0)) if x.requires_grad else None,)

    _record("relu", (x,), out, bwd)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes), requires_grad=x.requires_grad)
    inverse = tuple(np.argsort(axes))

    def bwd(g: Array):
        return (np.transpose(g, inverse) if x.requires_grad else None,)

    _record("transpose", (x,), out, bwd)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(tuple(shape)), requires_grad=x.requires_grad)

    def bwd(g: Array):
        return (g.reshape(x.shape) if x.requires_grad else None,)

    _record("reshape", (x,), out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()), requires_grad=x.requires_grad)

    def bwd(g: Array):
        return (np.broadcast_to(g, x.shape).copy() if x.requires_grad else None,)

    _record("sum", (x,), out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    out = Tensor(np.asarray(x.data.mean()), requires_grad=x.requires_grad)

    def bwd(g: Array):
        return ((np.broadcast_to(g, x.shape) / n) if x.requires_grad else None,)

    _record("mean", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax via max-subtraction; rows sum to 1 along ``axis``."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data, requires_grad=x.requires_grad)

    def bwd(g: Array):
        if not x.requires_grad:
            return (None,)
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    _record("softmax", (x,), out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad)

    def bwd(g: Array):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    _record("layer_norm", (x, gain, bias), out, bwd)
    return out


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]. Backward scatter-adds."""
    weight = _as_tensor(weight)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {weight.shape[0]}) in lookup"
        )
    out = Tensor(weight.data[idx], requires_grad=weight.requires_grad)

    def bwd(g: Array):
        if not weight.requires_grad:
            return (None,)
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    _record("embedding", (weight,), out, bwd)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * mask, requires_grad=x.requires_grad)

    def bwd(g: Array):
        return ((g * mask) if x.requires_grad else None,)

    _record("dropout", (x,), out, bwd)
    return out


def cross_entropy(logits: Tensor, targets) -> tuple[Tensor, Array]:
    """Mean negative log softmax probability of ``targets``.

    Returns ``(loss, nll)`` where ``loss`` is the scalar mean and ``nll`` the
    per-token negative log-likelihood vector (handy for perplexity).
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D [N, V], got {logits.shape}")
    t = np.asarray(targets)
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets must have shape ({n},), got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target id out of range [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), t]
    out = Tensor(np.asarray(nll.mean()), requires_grad=logits.requires_grad)

    def bwd(g: Array):
        if not logits.requires_grad:
            return (None,)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), t] -= 1.0
        return (g * probs / n,)

    _record("cross_entropy", (logits,), out, bwd)
    return out, nll


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced on ``tape``. Gradients accumulate into
    existing ``grad`` arrays; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = any(node.output is loss for node in tape.nodes)
    if not produced:
        raise ValueError("backward: loss was not produced on this tape")

    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.requires_grad:
            _accumulate(node.output, g)
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + ig
            else:
                pending[key] = ig
                holders[key] = inp
    # Whatever is left belongs to leaves (parameters, inputs).
    for key, g in pending.items():
        t = holders[key]
        if t.requires_grad:
            _accumulate(t, g)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def parameters_zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
