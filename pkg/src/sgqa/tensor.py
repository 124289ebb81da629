"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record a node on the active :class:`Tape` only when one is
active and at least one input requires a gradient. Outside a tape every
operation is a plain numpy evaluation, which is what finite-difference
checks and inference use.

Broadcasting is deliberately absent: binary operations demand identical
shapes, and the single broadcast case (a bias row added to every row of a
matrix) is its own operation, :func:`add_bias`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ParameterError

Array = np.ndarray

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("id", "inputs", "output", "backward")

    def __init__(self, node_id: int, inputs: tuple, output: "Tensor", backward: Callable):
        self.id = node_id
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations executed while the tape is active.

    Nodes are appended as operations run, so the list is topologically
    ordered by construction. Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, inputs: tuple, output: "Tensor", backward: Callable) -> Node:
        node = Node(len(self.nodes), inputs, output, backward)
        self.nodes.append(node)
        output._node = node
        output._tape = self
        return node

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[Array] = None
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Optional[Array]:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"gradient shape {value.shape} does not match tensor shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = None

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # Operator sugar. Python scalars are treated as constants.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(other, self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar(shape):
    raise ContractError(f"expected a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: Array, inputs: Sequence[Tensor], backward: Callable[[Array], tuple]) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient flows). Fused kernels elsewhere in the
    package use this to register hand-written backward passes.
    """
    tape = current_tape()
    inputs = tuple(inputs)
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out._grad = None
    out._node = None
    out._tape = None
    out.name = None
    if needs:
        tape.record(inputs, out, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "subtract")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def rsub_scalar(c: float, a: Tensor) -> Tensor:
    """``c - a`` for a constant ``c``."""
    return make_op(c - a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    # sign(0) = 0: subgradient choice at the kink
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: Array) -> Array:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name: add, subtract, hadamard, abs, tanh, sigmoid."""
    binary = {"add": add, "subtract": sub, "hadamard": mul}
    unary = {"abs": absolute, "tanh": tanh, "sigmoid": sigmoid, "log": log}
    if op_kind in binary:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    raise ContractError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands; a 1-D operand acts as a vector."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    out = ad @ bd
    if ad.ndim == 2 and bd.ndim == 2:
        def backward(g):
            return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)
    elif ad.ndim == 2:
        def backward(g):
            return (np.outer(g, bd) if a.requires_grad else None, ad.T @ g if b.requires_grad else None)
    elif bd.ndim == 2:
        def backward(g):
            return (bd @ g if a.requires_grad else None, np.outer(ad, g) if b.requires_grad else None)
    else:
        def backward(g):
            return (g * bd, g * ad)
    return make_op(np.asarray(out, dtype=np.float64), (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return make_op(a.data.T, (a,), lambda g: (g.T,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add bias row ``b`` (n,) to every row of ``x`` (m, n)."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")
    return make_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(y, (a,), backward)


def normalize(a: Tensor) -> Tensor:
    """Rescale a positive vector to sum to one."""
    if a.ndim != 1:
        raise DimensionError(f"normalize expects a vector, got {a.shape}")
    s = a.data.sum()
    if not s > 0:
        raise DomainError("normalize: total mass must be positive")
    y = a.data / s
    return make_op(y, (a,), lambda g: ((g - np.dot(g, y)) / s,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return make_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _check_axis(a, axis)
    return make_op(a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
        if n == 0:
            raise DomainError("mean over an empty tensor")
        return make_op(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))
    axis = _check_axis(a, axis)
    n = shape[axis]
    if n == 0:
        raise DomainError("mean over an empty slice")
    return make_op(a.data.mean(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),))


def max(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Maximum; the gradient goes to the first (lowest-index) maximiser."""
    shape = a.shape
    if a.size == 0 or (axis is not None and shape[_check_axis(a, axis)] == 0):
        raise DomainError("max over an empty slice")
    if axis is None:
        k = int(np.argmax(a.data))

        def backward(g):
            out = np.zeros(a.size)
            out[k] = g
            return (out.reshape(shape),)

        return make_op(np.asarray(a.data.reshape(-1)[k]), (a,), backward)
    axis = _check_axis(a, axis)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(out, (a,), backward)


def reduction(op_kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    table = {"sum": sum, "mean": mean, "max": max}
    if op_kind not in table:
        raise ContractError(f"unknown reduction {op_kind!r}")
    return table[op_kind](a, axis)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("stack of nothing")
    for t in tensors:
        if t.shape != tensors[0].shape:
            raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_op(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing; the backward pass scatter-adds."""
    shape = a.shape
    try:
        out = a.data[key]
    except IndexError as exc:
        raise IndexError(f"index {key!r} out of range for shape {shape}") from exc
    out = np.array(out, dtype=np.float64)

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_op(out, (a,), backward)


def gather(a: Tensor, rows: Iterable[int]) -> Tensor:
    """Select rows by index; duplicate rows accumulate gradient."""
    idx = np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: row index out of range for {n} rows")
    return index(a, idx)


def scatter_add(g: Array, rows: Iterable[int], n_rows: int) -> Array:
    """Adjoint of :func:`gather` on plain arrays."""
    idx = np.asarray(list(rows), dtype=np.int64)
    out = np.zeros((n_rows,) + np.asarray(g).shape[1:])
    np.add.at(out, idx, g)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise IndexError(f"slice [{start}:{stop}] out of range for {a.shape[0]} rows")
    return index(a, slice(start, stop))


def structural(op_kind: str, *args, **kwargs) -> Tensor:
    table = {"concat": concat, "slice": slice_rows, "gather": gather, "transpose": transpose, "stack": stack}
    if op_kind not in table:
        raise ContractError(f"unknown structural op {op_kind!r}")
    return table[op_kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


class RngState:
    """Seeded PCG64 stream whose position can be saved and restored."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape=None):
        return self.generator.random(shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def get_state(self) -> dict:
        st = self.generator.bit_generator.state
        return {"seed": self.seed, "state": int(st["state"]["state"]), "inc": int(st["state"]["inc"]),
                "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"])}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.generator.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngState]) -> Tensor:
    """Inverted dropout. Identity when ``rate == 0`` or not training."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an RngState")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._tape is not tape:
        if not loss.requires_grad:
            # constant graph: nothing to differentiate
            return
        raise ContractError("loss was not recorded on this tape")
    loss._grad = np.ones_like(loss.data)
    nodes = tape.nodes
    for k in range(loss._node.id, -1, -1):
        node = nodes[k]
        g = node.output._grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._grad is None:
                t._grad = np.array(gi, dtype=np.float64, copy=True).reshape(t.data.shape)
            else:
                t._grad += gi
