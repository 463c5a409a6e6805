"""Dense float64 arithmetic with a small reverse-mode tape.

`Tensor` wraps a numpy array and records the operations applied to it so
that `Tensor.backward` can push gradients to every `Parameter` it depends
on.  Only the operations the model and losses need are provided; broadcasting
follows numpy and is undone in the backward pass.
"""

from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DegenerateInputError, FixtureError, NumericalAbort

DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @staticmethod
    def _node(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        a, b = self, other

        def back(g):
            gx = _unbroadcast(g * y, x.shape) if a.requires_grad else None
            gy = _unbroadcast(g * x, y.shape) if b.requires_grad else None
            return gx, gy

        return Tensor._node(x * y, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._node(
            x / y,
            (self, other),
            lambda g: (
                _unbroadcast(g / y, x.shape),
                _unbroadcast(-g * x / (y * y), y.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        x = self.data
        return Tensor._node(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        a, b = self, other

        def back(g):
            gx = gy = None
            if a.requires_grad:
                gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
            if b.requires_grad:
                if y.ndim == 2 and x.ndim > 2:
                    # shared weight: fold the batch axes into one product
                    gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
            return gx, gy

        return Tensor._node(x @ y, (self, other), back)

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- unary maps ----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        x = self.data
        return Tensor._node(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))

    def gelu(self):
        """Tanh approximation of GELU (smooth, so finite differences behave)."""
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        x2 = x * x
        inner = c * x * (1.0 + 0.044715 * x2)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return Tensor._node(out, (self,), back)

    # -- shape ops -----------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return Tensor._node(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape, dtype=DTYPE)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._node(self.data[idx], (self,), back)

    # -- fused ops -----------------------------------------------------
    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

        return Tensor._node(p, (self,), back)

    def logsumexp(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out = (np.log(s) + m).squeeze(axis)

        def back(g):
            return (np.expand_dims(g, axis) * e / s,)

        return Tensor._node(out, (self,), back)

    def normalize(self, axis: int = -1):
        """Scale to unit L2 norm along `axis`; a zero-norm slice is an error."""
        x = self.data
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        if np.any(norm == 0.0):
            raise DegenerateInputError("cannot normalize a zero-norm vector")
        y = x / norm

        def back(g):
            return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

        return Tensor._node(y, (self,), back)


class Parameter(Tensor):
    """A named trainable tensor; its gradient accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._node(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine gain and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return gx, ggamma, gbeta

    return Tensor._node(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# plain numpy helpers


def _check_rows(name: str, M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateInputError(f"{name} has zero-norm row(s) {bad.tolist()}")
    return norms


def pairwise_cosine(A, B) -> np.ndarray:
    """Cosine similarity between every row of `A` and every row of `B`."""
    A = np.atleast_2d(np.asarray(A, dtype=DTYPE))
    B = np.atleast_2d(np.asarray(B, dtype=DTYPE))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    na = _check_rows("A", A)
    nb = _check_rows("B", B)
    return np.clip((A / na[:, None]) @ (B / nb[:, None]).T, -1.0, 1.0)


def pearson_corr(x, y) -> float:
    x = np.asarray(x, dtype=DTYPE).ravel()
    y = np.asarray(y, dtype=DTYPE).ravel()
    if x.shape != y.shape:
        raise ValueError("pearson_corr needs equal-length inputs")
    if x.size < 2:
        raise DegenerateInputError("pearson_corr needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("pearson_corr is undefined for zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter shifted by
    ``±h``.  With ``max_coords`` only that many coordinates, drawn without
    replacement, are probed.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-6, 1e-4]")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalAbort("objective is not finite")
    loss.backward()

    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and max_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst = 0.0
    with no_grad():
        for pi, j in coords:
            flat = params[pi].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalAbort("objective is not finite under perturbation")
            numeric = (fp - fm) / (2 * h)
            analytic = params[pi].grad.reshape(-1)[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# SOLT tensor files

_MAGIC = b"SOLT"


def solt_bytes(array) -> bytes:
    a = np.array(array, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = _MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def solt_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != _MAGIC:
        raise FixtureError(f"{source}: not a SOLT tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise FixtureError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 8 * count:
        raise FixtureError(f"{source}: expected {count} values, file size disagrees")
    return np.frombuffer(buf, dtype="<f8", offset=off, count=count).reshape(dims).astype(DTYPE)


def write_solt(path, array) -> None:
    Path(path).write_bytes(solt_bytes(array))


def read_solt(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"missing tensor file: {path}")
    return solt_from_bytes(path.read_bytes(), str(path))
