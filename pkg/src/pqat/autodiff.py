"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. The graph is rebuilt on
every forward pass and dropped together with the loss tensor.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition on its arguments is violated."""


class Tensor:
    """Dense real array with a gradient buffer of identical shape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out.name = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _check_suffix_broadcast(a: Tensor, b: Tensor, op: str) -> int:
    """Number of leading axes of ``a`` that ``b`` is broadcast over."""
    if a.shape == b.shape:
        return 0
    lead = a.values.ndim - b.values.ndim
    if lead > 0 and a.shape[lead:] == b.shape:
        return lead
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row (or matrix) repeated over the leading
    axes of ``a``."""
    lead = _check_suffix_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        if b.requires_grad:
            b.grad += _reduce_lead(g, lead)

    return _make(a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        if b.requires_grad:
            b.grad -= _reduce_lead(g, lead)

    return _make(a.values - b.values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.values)
        if b.requires_grad:
            b.grad += _reduce_lead(g * a.values, lead)

    return _make(a.values * b.values, (a, b), backward)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.values * c, (a,), lambda g: _accumulate(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` matrix shared
    across the leading axes, or ``(..., k, n)`` with the same leading axes.
    """
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.values.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ np.swapaxes(b.values, -1, -2)
        if b.requires_grad:
            if b.values.ndim == 2:
                k, n = b.shape
                b.grad += a.values.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                b.grad += np.swapaxes(a.values, -1, -2) @ g

    return _make(a.values @ b.values, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.values, -1, -2), (a,),
                 lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.values.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def shift_down(a: Tensor) -> Tensor:
    """Move every row one step down along the second-to-last axis; the first row
    becomes zero. ``out[..., i, :] = a[..., i - 1, :]``."""
    if a.values.ndim < 2:
        raise DimensionError(f"shift_down: need at least 2-d input, got {a.shape}")
    out = np.zeros_like(a.values)
    out[..., 1:, :] = a.values[..., :-1, :]

    def backward(g):
        if a.requires_grad:
            a.grad[..., :-1, :] += g[..., 1:, :]

    return _make(out, (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, index, g)
            a.grad += full

    return _make(np.array(a.values[index], dtype=np.float64), (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.array(a.values.sum()), (a,), lambda g: _accumulate(a, np.full(a.shape, float(g))))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.array(a.values.mean()), (a,), lambda g: _accumulate(a, np.full(a.shape, float(g) / n)))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(a.values * mask, (a,), lambda g: _accumulate(a, g * mask))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    e = np.exp(a.values - a.values.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit population variance,
    then apply the learnable ``scale`` and ``shift`` vectors."""
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} do not match row size {d}")
    xc = x.values - x.values.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.values.ndim - 1))

    def backward(g):
        if scale.requires_grad:
            scale.grad += (g * xhat).sum(axis=lead)
        if shift.requires_grad:
            shift.grad += g.sum(axis=lead)
        if x.requires_grad:
            gx = g * scale.values
            x.grad += inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    return _make(xhat * scale.values + shift.values, (x, scale, shift), backward)


def cross_entropy_logits(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is a vector with a scalar ``target``, or an ``(N, C)`` matrix with
    one target index per row; the result is always a scalar tensor.
    """
    single = logits.values.ndim == 1
    z = logits.values[None, :] if single else logits.values
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy_logits: expected 1-d or 2-d logits, got {logits.shape}")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = z.shape
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy_logits: {tgt.size} targets for {n} rows")
    bad = tgt[(tgt < 0) | (tgt >= c)]
    if bad.size:
        raise IndexError(f"cross_entropy_logits: target {int(bad[0])} out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = logsum - shifted[rows, tgt]

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - logsum[:, None])
            p[rows, tgt] -= 1.0
            p *= float(g) / n
            logits.grad += p[0] if single else p

    return _make(np.array(losses.mean()), (logits,), backward)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def gather_rows(table: Tensor, ids) -> Tensor:
    """Look up rows of a ``(V, D)`` table; output shape is ``ids.shape + (D,)``.

    The reverse pass scatter-adds, so repeated ids accumulate their gradients.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got {table.shape}")
    v = table.shape[0]
    bad = ids[(ids < 0) | (ids >= v)]
    if bad.size:
        raise IndexError(f"gather_rows: id {int(bad.reshape(-1)[0])} out of range [0, {v})")

    def backward(g):
        if table.requires_grad:
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _make(table.values[ids], (table,), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each listed after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Leaf gradients accumulate across calls. Intermediate buffers are reset on
    every call, so running backward twice on one graph doubles the leaf grads.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        loss.grad += 1.0
        return
    order = topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = np.zeros_like(node.values)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def finite_diff_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Worst relative error between the analytic gradient of ``f`` with respect
    to ``x`` and central differences.

    ``f`` must rebuild the loss from the current ``x.values``. Entry ``i`` scores
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``; ``floor`` keeps entries whose
    true gradient is zero from dividing rounding noise by zero.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: step h must be positive")
    x.zero_grad()
    backward(f())
    analytic = x.grad.reshape(-1).copy()
    flat = x.values.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
