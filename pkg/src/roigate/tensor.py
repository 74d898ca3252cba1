"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order. Feature maps use a
channels-major (C, H, W) layout, matrices use (rows, cols). A tensor
produced by an operation remembers its inputs and a backward rule;
``backward`` on a scalar replays those rules in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad`` set.

Broadcasting is deliberately restricted: two shapes must have equal
rank, and the second operand may only expand singleton dimensions.
There is no implicit rank promotion.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# Workspace: optional buffer reuse for iteration-shaped graphs.
#
# A training loop rebuilds an identically-shaped graph every iteration.
# Large numpy allocations go through mmap and are returned to the OS on
# free, so each iteration pays page-fault cost again. An active
# workspace hands out cached buffers instead; ``reset`` makes all of
# them reusable. Nothing may hold a pooled buffer across a reset, which
# holds for a graph that is discarded once the optimizer step is done.
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self) -> None:
        self._store: dict = {}
        self._cursor: dict = {}

    def reset(self) -> None:
        for key in self._cursor:
            self._cursor[key] = 0

    def take(self, shape: tuple, dtype, zero: bool) -> np.ndarray:
        key = (shape, np.dtype(dtype))
        slot = self._cursor.get(key, 0)
        self._cursor[key] = slot + 1
        bucket = self._store.setdefault(key, [])
        if slot < len(bucket):
            buf = bucket[slot]
        else:
            buf = np.empty(shape, dtype)
            bucket.append(buf)
        if zero:
            buf[...] = 0
        return buf


_active_workspace: Workspace | None = None


@contextlib.contextmanager
def workspace():
    """Enable pooled buffer allocation inside the context."""
    global _active_workspace
    prev = _active_workspace
    ws = Workspace()
    _active_workspace = ws
    try:
        yield ws
    finally:
        _active_workspace = prev


def alloc(shape: tuple, dtype, zero: bool = False) -> np.ndarray:
    if _active_workspace is not None:
        return _active_workspace.take(tuple(shape), dtype, zero)
    if zero:
        return np.zeros(shape, dtype)
    return np.empty(shape, dtype)


# ---------------------------------------------------------------------------
# Grad mode: building the graph can be switched off for inference.
# ---------------------------------------------------------------------------

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real-valued array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensor data must be numeric, got {arr.dtype}")
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- gradient handling --------------------------------------------
    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, self.data.dtype)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise_mul(self, other)


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are on."""
    out = Tensor.__new__(Tensor)
    if data.ndim == 0:
        data = data.reshape(1)
    out.data = data
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = alloc(t.data.shape, t.data.dtype, zero=True)
    t.grad += g


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, state = stack.pop()
        if state == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, 1))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add across calls; callers that want fresh gradients must
    zero them first. Using a tensor several times in one graph likewise
    sums the per-use contributions.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    if loss.grad is None:
        loss.grad = np.ones(loss.data.shape, loss.data.dtype)
    else:
        loss.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Broadcast helpers (singleton expansion only, equal rank)
# ---------------------------------------------------------------------------

def broadcast_check(a_shape: tuple, b_shape: tuple) -> tuple:
    """Validate b -> a broadcast; return axes of b that expand."""
    if a_shape == b_shape:
        return ()
    if len(a_shape) != len(b_shape):
        raise ShapeMismatch(
            f"incompatible shapes {a_shape} vs {b_shape} "
            "(broadcast requires equal rank)")
    axes = []
    for i, (ad, bd) in enumerate(zip(a_shape, b_shape)):
        if bd == ad:
            continue
        if bd == 1:
            axes.append(i)
        else:
            raise ShapeMismatch(
                f"incompatible shapes {a_shape} vs {b_shape} "
                f"(dim {i}: {bd} is neither {ad} nor 1)")
    return tuple(axes)


def reduce_to_shape(g: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    if not axes:
        return g
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    axes = broadcast_check(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, reduce_to_shape(g, b.shape, axes))

    return make_op(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = broadcast_check(a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, -reduce_to_shape(g, b.shape, axes))

    return make_op(out, (a, b), bwd)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; b may broadcast to a over singleton dims.

    Gradient flows to both operands, sum-reduced over broadcast axes
    for b.
    """
    axes = broadcast_check(a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            accumulate_grad(a, g * b.data)
        if b.requires_grad:
            accumulate_grad(b, reduce_to_shape(g * a.data, b.shape, axes))

    return make_op(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        accumulate_grad(a, g * c)

    return make_op(out, (a,), bwd)


def tensor_sum(a: Tensor, axis: int | None = None,
               keepdims: bool = False) -> Tensor:
    if axis is None:
        out = a.data.sum().reshape(1)

        def bwd(g):
            accumulate_grad(a, np.broadcast_to(g.reshape(()), a.shape))

        return make_op(out, (a,), bwd)

    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd_axis(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(gg, a.shape))

    return make_op(out, (a,), bwd_axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def bwd(g):
        accumulate_grad(a, g.reshape(a.shape))

    return make_op(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along an existing axis; gradient splits back."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            accumulate_grad(t, np.moveaxis(moved[a:b], 0, axis))

    return make_op(out, tensors, bwd)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_rows needs at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeMismatch(
                f"stack_rows shapes differ: {base} vs {t.shape}")
    out = np.stack([t.data for t in tensors])

    def bwd(g):
        for i, t in enumerate(tensors):
            accumulate_grad(t, g[i])

    return make_op(out, tensors, bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5,
                      exclude: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference grads.

    ``f`` must be a deterministic map from one tensor to a scalar
    tensor. The relative error of one element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Kink policy: operations like relu and max pooling are not
    differentiable everywhere. Elements whose perturbation interval
    [x-eps, x+eps] may straddle such a kink can be masked out via
    ``exclude``; alternatively callers re-run with a smaller step. The
    analytic side always uses the documented one-sided convention
    (relu'(0) = 0, ties take the first row-major element).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data.astype(np.float64, copy=True), requires_grad=True)
    y = f(probe)
    if y.data.size != 1:
        raise ValueError(
            f"finite_diff_check requires a scalar function, got {y.shape}")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(probe.data)).data.reshape(()))
            flat[i] = orig - eps
            lo = float(f(Tensor(probe.data)).data.reshape(()))
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.abs(a - numeric) / denom
    if exclude is not None:
        rel = rel[~exclude.reshape(-1)]
        if rel.size == 0:
            return 0.0
    return float(rel.max())


def check_gradients(f: Callable[..., Tensor], inputs: Iterable[Tensor],
                    eps: float = 1e-5) -> float:
    """Run finite_diff_check against each input of a multi-input map."""
    inputs = list(inputs)
    worst = 0.0
    for k in range(len(inputs)):
        def restricted(t: Tensor, _k=k) -> Tensor:
            args = [Tensor(p.data, requires_grad=True) for p in inputs]
            args[_k] = t
            return f(*args)

        worst = max(worst, finite_diff_check(restricted, inputs[k], eps=eps))
    return worst
