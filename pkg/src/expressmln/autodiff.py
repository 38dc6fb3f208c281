"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (a context manager).
Outside a tape the same functions just compute values, which is what the
inference paths use.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    >>> float(tape.backward(y, [x])[0])
    6.0
"""

from __future__ import annotations

import struct
import json
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records differentiable operations; confined to one thread."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list = []
        self._used = False

    def __enter__(self):
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._local.stack.pop()
        return False

    @classmethod
    def current(cls):
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def backward(self, out: Tensor, params: Sequence[Tensor]) -> list:
        """Gradients of scalar ``out`` w.r.t. ``params``; zeros when unreached."""
        if out.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass; rerun the forward pass")
        self._used = True
        grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [np.asarray(grads.get(id(p), np.zeros_like(p.data)), dtype=np.float64).reshape(p.shape)
                for p in params]


def _check(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(_check(data, op))
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), -unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def logistic(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "logistic")


def log_sigmoid(a) -> Tensor:
    """``log(logistic(a))`` without underflow."""
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(_log_sigmoid(a.data), (a,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``(n, k) @ (k, m)``; forward runs the row-deterministic kernel."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    out = _kernels.matmul(a.data, b.data)
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def matvec(a, x) -> Tensor:
    """``(n, k) @ (k,)``."""
    a, x = as_tensor(a), as_tensor(x)
    if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
        raise _shape_error("matvec", a, x)
    out = _kernels.matmul(a.data, x.data[:, None])[:, 0]
    return _make(out, (a, x), lambda g: (np.outer(g, x.data), a.data.T @ g), "matvec")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, ts, backward, "concat")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, rows) -> Tensor:
    """Gather rows (first axis); repeated indices accumulate in backward."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), backward, "take")


def segment_sum(a, ids, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``ids``."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) != a.shape[0]:
        raise ValueError("segment_sum: one id per row required")
    out = _kernels.segment_sum(a.data, ids, n_segments)
    return _make(out, (a,), lambda g: (g[ids],), "segment_sum")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam optimiser; ``lr`` may be changed between steps by a schedule."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = self._v = None
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], maximize: bool = False) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        # one flat update instead of a loop over many small arrays
        g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
        if self._m is None:
            self._m = np.zeros_like(g)
            self._v = np.zeros_like(g)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self._m *= b1
        self._m += (1.0 - b1) * g
        self._v *= b2
        self._v += (1.0 - b2) * g * g
        m_hat = self._m / (1.0 - b1 ** self.t)
        v_hat = self._v / (1.0 - b2 ** self.t)
        delta = (1.0 if maximize else -1.0) * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        pos = 0
        for p in self.params:
            n = p.data.size
            p.data = p.data + delta[pos:pos + n].reshape(p.shape)
            pos += n


class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, patience: int = 10, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr *= self.factor
                self.bad_epochs = 0
        return self.optimizer.lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"XMLNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays as little-endian f64 with a JSON metadata block."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(tensors, meta)`` written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(buf):
                raise CheckpointError("truncated checkpoint")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return tensors, meta
