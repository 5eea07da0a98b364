"""Dense float64 tensors with reverse-mode autodiff, counter-based RNG, and SPTN i/o.

Everything numeric in the lab (model math, losses, gradients) flows through the
Tensor class here. Arrays are always float64: at desk scale speed is irrelevant
and the gradient checks need the precision.
"""
from __future__ import annotations

import itertools
import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "cat",
    "softmax",
    "backward",
    "finite_diff_check",
    "Rng",
    "sample_normal",
    "write_sptn",
    "read_sptn",
    "SPTN_MAGIC",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


_tape_ids = itertools.count(1)


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array with an optional autodiff tape node.

    Tensors are immutable after construction (the data buffer is never written
    by ops); each op returns a fresh Tensor. A tensor is "recorded" when it
    requires gradients: recorded tensors carry a tape_id and, for op results,
    a backward closure over their parents. Graphs are per-trace and share no
    mutable state, so independent traces may run on different threads.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_mode.enabled
        self.tape_id = next(_tape_ids) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None
        self._backward_done = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], grad_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_mode.enabled and any(p.requires_grad for p in parents)
        out.tape_id = next(_tape_ids) if out.requires_grad else None
        out._parents = parents if out.requires_grad else ()
        out._grad_fn = grad_fn if out.requires_grad else None
        out._backward_done = False
        return out

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (numpy broadcasting; grads are unbroadcast) ---

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _check_elementwise(self, other: "Tensor", op: str):
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.shape} and {other.shape} do not broadcast")

    def __add__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "add")
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "sub")
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "mul")
        a, b = self, other
        return Tensor._result(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        self._check_elementwise(other, "div")
        a, b = self, other
        return Tensor._result(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def scale(self, s: float) -> "Tensor":
        """Multiply by a python scalar."""
        return self * float(s)

    def __pow__(self, exponent: float):
        p = float(exponent)
        return Tensor._result(
            self.data ** p,
            (self,),
            lambda g: (g * p * self.data ** (p - 1.0),),
        )

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * out_data,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._result(out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),))

    def silu(self) -> "Tensor":
        return self * self.sigmoid()

    # -- matmul ---------------------------------------------------------------

    def matmul(self, other) -> "Tensor":
        """Matrix product. Supports 2-D x 2-D, stacked (same leading dims),
        and stacked x 2-D (shared weight applied over leading dims)."""
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
        if not (b.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
            raise ShapeError(f"matmul: leading dims differ for shapes {a.shape} and {b.shape}")

        def grad_fn(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ga, gb

        return Tensor._result(np.matmul(a.data, b.data), (a, b), grad_fn)

    __matmul__ = matmul

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor._result(np.asarray(out_data), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy() / count,)

        return Tensor._result(np.asarray(out_data), (self,), grad_fn)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(self.shape),)
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._result(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),)
        )

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def grad_fn(g):
            gx = np.zeros(self.shape)
            gx[idx] += g
            return (gx,)

        return Tensor._result(np.asarray(out_data), (self,), grad_fn)

    def take(self, indices: np.ndarray, axis: int = 0) -> "Tensor":
        """Gather rows along `axis` with an integer index array; the gradient
        scatter-adds back (duplicate indices accumulate)."""
        idx = np.asarray(indices, dtype=np.intp)
        out_data = np.take(self.data, idx, axis=axis)

        def grad_fn(g):
            gx = np.zeros(self.shape)
            gx_m = np.moveaxis(gx, axis, 0)
            g_m = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
            np.add.at(gx_m, idx, g_m)
            return (gx,)

        return Tensor._result(out_data, (self,), grad_fn)

    def backward(self) -> None:
        backward(self)


def cat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis (default: last)."""
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("cat: need at least one tensor")
    datas = [t.data for t in tensors]
    try:
        out_data = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"cat: shapes {[t.shape for t in tensors]} do not concatenate on axis {axis}")
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out_data, tuple(tensors), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (subtract-max) along `axis`."""
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._result(out_data, (x,), grad_fn)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a recorded scalar; leaves accumulate dLoss/dLeaf
    in .grad. A second sweep from the same result without rebuilding the graph
    is an error."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not recorded on any tape")
    if loss._backward_done:
        raise RuntimeError("backward: already called on this result; rebuild the graph first")
    loss._backward_done = True

    # Iterative topological order over the recorded subgraph.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients of scalar f and central
    differences: max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-8)."""
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    x0 = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(x0)
    if out.data.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise ValueError("finite_diff_check: f returned a non-finite value")
    backward(out)
    analytic = x0.grad.ravel()

    flat = np.array(x.data, copy=True).ravel()
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            for sign, slot in ((+1.0, 0), (-1.0, 1)):
                probe = flat.copy()
                probe[i] += sign * eps
                val = f(Tensor(probe.reshape(x.shape))).data
                if not np.isfinite(val).all():
                    raise ValueError("finite_diff_check: f returned a non-finite value")
                if slot == 0:
                    hi = float(val)
                else:
                    lo = float(val)
            fd[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))


# -- seeded randomness ---------------------------------------------------------


class Rng:
    """Counter-based (Philox) random stream: same seed + same call sequence
    gives the same values on any platform. split(i) derives an independent
    stream, so per-clip generation parallelizes without order sensitivity."""

    algorithm = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"Rng: seed must be a 64-bit unsigned int, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.stream << 64) | self.seed
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.stream * 1_000_003 + int(index) + 1)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, tuple(shape))

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, tuple(shape))


def sample_normal(rng: Rng, shape) -> Tensor:
    """Standard-normal tensor from a counter-based stream."""
    shape = tuple(shape)
    if len(shape) == 0:
        raise ValueError("sample_normal: shape must be nonempty")
    return Tensor(rng.normal(shape))


# -- SPTN flat binary tensor format --------------------------------------------
#
# Layout (little-endian): magic "SPTN", u32 rank, u64 per dim, f64 payload
# in row-major order.

SPTN_MAGIC = b"SPTN"


def write_sptn(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", SPTN_MAGIC, arr.ndim))
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.astype("<f8").tobytes())


def sptn_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    return (
        struct.pack("<4sI", SPTN_MAGIC, arr.ndim)
        + np.asarray(arr.shape, dtype="<u8").tobytes()
        + arr.astype("<f8").tobytes()
    )


def read_sptn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_sptn_stream(fh)


def read_sptn_stream(fh) -> np.ndarray:
    head = fh.read(8)
    if len(head) < 8:
        raise ValueError("SPTN: truncated header")
    magic, rank = struct.unpack("<4sI", head)
    if magic != SPTN_MAGIC:
        raise ValueError(f"SPTN: bad magic {magic!r}")
    dims_raw = fh.read(8 * rank)
    if len(dims_raw) < 8 * rank:
        raise ValueError("SPTN: truncated dims")
    dims = np.frombuffer(dims_raw, dtype="<u8").astype(np.intp)
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise ValueError("SPTN: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(tuple(dims)).copy()
