"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable: the backing array is flagged read-only on
construction, so a tensor can be shared across threads freely.  Operations
that see an active :class:`GradTape` (entered with ``with``) and at least
one input with ``requires_grad`` record a backward rule on that tape.

Example::

    x = create([3], [1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        loss = tensor_sum(mul(x, x))
    grads = tape.backward(loss)
    grads[x.id]          # Tensor [2., 4., 6.]
"""
from __future__ import annotations

import itertools
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DetachedLoss,
    NonFiniteFunctionValue,
    NonFiniteInput,
    NotScalarLoss,
    ShapeMismatch,
)

_ids = itertools.count(1)
_state = threading.local()
_debug = os.environ.get("L2LESION_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Re-check every recorded op output for NaN/Inf (slow)."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("_data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, *, check: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteInput("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Trusted fast path for op outputs: no copy, no finiteness scan.
        t = cls.__new__(cls)
        arr = np.require(arr, dtype=np.float64, requirements="C")  # keeps 0-d arrays 0-d
        if arr.flags.writeable and arr.base is not None:
            arr = arr.copy()
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float("nan")

    def tolist(self):
        return self._data.tolist()

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, data={self._data.tolist()}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def create(shape: Sequence[int], data: Sequence[float], requires_grad: bool = False) -> Tensor:
    shape = [int(s) for s in shape]
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"shape entries must be positive, got {shape}")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if math.prod(shape) != flat.size:
        raise ShapeMismatch(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad, check=False)


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape

class _Node:
    __slots__ = ("inputs", "output_id", "backward")

    def __init__(self, inputs, output_id, backward):
        self.inputs = inputs
        self.output_id = output_id
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops for one forward pass.

    One tape per step per thread; not safe to share concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, Tensor] = {}
        self._recorded: set[int] = set()

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), out.id, backward))
        self._recorded.add(out.id)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of scalar ``loss`` keyed by tensor id."""
        if loss.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {list(loss.shape)}")
        if loss.id not in self._recorded:
            raise DetachedLoss("loss was not produced by an op recorded on this tape")
        acc: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
        for node in reversed(self.nodes):
            g = acc.get(node.output_id)
            if g is None:
                continue
            parts = node.backward(g)
            for inp, part in zip(node.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                prev = acc.get(inp.id)
                acc[inp.id] = part if prev is None else prev + part
        self.grads = {k: Tensor._wrap(v) for k, v in acc.items()}
        return self.grads

    def gradient(self, loss: Tensor, tensors: Iterable[Tensor]) -> list[Tensor]:
        """Convenience: gradients for ``tensors`` in order, zeros when unreachable."""
        grads = self.backward(loss)
        return [grads.get(t.id) or zeros(t.shape) for t in tensors]


def active_tape() -> GradTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record ``backward`` if anything needs grad.

    ``backward(g)`` receives the upstream gradient as an ndarray and returns
    one ndarray (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    if _debug and not np.all(np.isfinite(out_data)):
        raise NonFiniteInput("op produced NaN or Inf")
    out = Tensor._wrap(out_data, needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------- ops

def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {list(a.shape)} vs {list(b.shape)}")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    x, y = a.data, b.data
    if op == "add":
        return record(x + y, (a, b), lambda g: (g, g))
    if op == "sub":
        return record(x - y, (a, b), lambda g: (g, -g))
    if op == "mul":
        return record(x * y, (a, b), lambda g: (g * y, g * x))
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return record(a.data * alpha, (a,), lambda g: (g * alpha,))


def affine(a: Tensor, alpha: float, beta: float) -> Tensor:
    """``alpha * a + beta`` with scalar constants."""
    alpha, beta = float(alpha), float(beta)
    return record(a.data * alpha + beta, (a,), lambda g: (g * alpha,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {list(a.shape)} by {list(b.shape)}")
    x, y = a.data, b.data
    return record(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    if math.prod(shape) != a.size:
        raise ShapeMismatch(f"cannot reshape {list(old)} to {list(shape)}")
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [p.data for p in parts]
    sizes = [a.shape[axis] for a in arrs]
    cuts = np.cumsum(sizes)[:-1]
    return record(np.concatenate(arrs, axis=axis), tuple(parts),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def index(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the leading axis."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return record(a.data[i], (a,), backward)


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather leading-axis rows; repeated rows accumulate gradient."""
    idx = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record(a.data[idx], (a,), backward)


# ------------------------------------------------------------ fd oracle

def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate by coordinate."""
    if not h > 0:
        raise ValueError("step size must be positive")
    base = x.numpy().reshape(-1)
    out = np.empty_like(base)

    def value(arr):
        r = f(Tensor._wrap(arr.reshape(x.shape)))
        v = float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)
        if not math.isfinite(v):
            raise NonFiniteFunctionValue("function value is not finite")
        return v

    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        fp = value(base.copy())
        base[i] = orig - h
        fm = value(base.copy())
        base[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(out.reshape(x.shape))


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------- text format

def format_tensor(t: Tensor) -> str:
    shape = " ".join(str(s) for s in t.shape)
    values = " ".join(format(float(v), ".17g") for v in t.data.reshape(-1))
    return f"{shape}\n{values}\n"


def parse_tensor(text: str) -> Tensor:
    lines = text.split("\n")
    if len(lines) < 2:
        raise ShapeMismatch("tensor text needs a shape line and a value line")
    shape = [int(s) for s in lines[0].split()]
    values = [float(v) for v in lines[1].split()]
    if math.prod(shape) != len(values):
        raise ShapeMismatch(f"shape {shape} needs {math.prod(shape)} values, got {len(values)}")
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        return parse_tensor(fh.read())
