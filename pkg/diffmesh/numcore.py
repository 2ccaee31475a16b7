""" Reverse-mode automatic differentiation over 64-bit numpy arrays. """

import collections
import contextlib
import logging
import math
import struct
import typing as t

import numpy as np

from diffmesh.errors import DimensionError, FormatError, StateError
from diffmesh.parsers import transaction
from diffmesh.typing import Array, Shape


logger = logging.getLogger(__name__)

DTYPE = np.float64
PARAMS_MAGIC = b"DMV1"
MASK64 = (1 << 64) - 1

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> t.Iterator[None]:
    """
    Disable graph recording inside the `with` block. Values are computed as
    usual but no tensor created inside requires a gradient.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    A dense array of 64-bit reals that records how it was computed, so that
    `backward` can propagate gradients to every tensor on the path that has
    `requires_grad` set. Gradients accumulate additively.

    Examples:

        >>> x = Tensor([1.0, 2.0], requires_grad=True)
        >>> y = sum_all(x * x + x)
        >>> y.item()
        8.0
        >>> y.backward()
        >>> x.grad.tolist()
        [3.0, 5.0]
    """

    # Arrays defer to the reflected operators below instead of broadcasting.
    __array_ufunc__ = None

    def __init__(self, data: t.Any, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: t.Optional[Array] = None
        self._parents: t.Tuple["Tensor", ...] = ()
        self._backward: t.Optional[t.Callable] = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def values(self) -> Array:
        """Flat view of the values."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data.copy()

    def accumulate(self, grad: Array):
        """Add `grad` to the gradient accumulator."""
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: t.Optional[Array] = None):
        """
        Propagate gradients from this tensor to every tensor it depends on.
        The graph is released afterwards; leaf tensors keep their gradients.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                parent_grads = node._backward(node.grad)
                for parent, parent_grad in zip(node._parents, parent_grads):
                    if parent_grad is not None and parent.requires_grad:
                        parent.accumulate(parent_grad)
            node._parents = ()
            node._backward = None

    def __add__(self, other: t.Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: t.Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: t.Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: t.Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: t.Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: t.Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: t.Any) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: t.Any) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: t.Any) -> Tensor:
    """Return `value` unchanged if it is a `Tensor`, else a constant one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def topological_order(root: Tensor) -> t.List[Tensor]:
    """
    Return all tensors `root` depends on, parents before children. Iterative
    so that deep graphs do not hit the recursion limit.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: Array, parents: t.Sequence[Tensor], backward: t.Callable) -> Tensor:
    requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(a: Shape, b: Shape) -> Shape:
    """
    Return the result shape of an elementwise op. The shorter shape must be a
    trailing part of the longer one: broadcasting happens over leading axes
    only.

    Examples:

        >>> _broadcast_shape((4, 3), (3,))
        (4, 3)

        >>> _broadcast_shape((), (2, 2))
        (2, 2)

        >>> _broadcast_shape((4, 3), (4, 1))
        Traceback (most recent call last):
          ...
        diffmesh.errors.DimensionError: Cannot broadcast shapes (4, 3) and (4, 1)
    """
    longer, shorter = (a, b) if len(a) >= len(b) else (b, a)
    if longer[len(longer) - len(shorter) :] != shorter:
        raise DimensionError(f"Cannot broadcast shapes {a} and {b}")
    return longer


def _unbroadcast(grad: Array, shape: Shape) -> Array:
    if grad.shape == shape:
        return grad
    return grad.reshape((-1,) + shape).sum(axis=0)


def _elementwise(
    a: t.Any,
    b: t.Any,
    forward: t.Callable,
    grad_a: t.Callable,
    grad_b: t.Callable,
) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    data = forward(a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(grad_a(g, a.data, b.data), a.shape) if a.requires_grad else None,
            _unbroadcast(grad_b(g, a.data, b.data), b.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), backward)


def add(a: t.Any, b: t.Any) -> Tensor:
    return _elementwise(
        a, b, np.add, lambda g, x, y: g, lambda g, x, y: g
    )


def sub(a: t.Any, b: t.Any) -> Tensor:
    return _elementwise(
        a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g
    )


def mul(a: t.Any, b: t.Any) -> Tensor:
    return _elementwise(
        a,
        b,
        np.multiply,
        lambda g, x, y: g * np.broadcast_to(y, g.shape),
        lambda g, x, y: g * np.broadcast_to(x, g.shape),
    )


def div(a: t.Any, b: t.Any) -> Tensor:
    return _elementwise(
        a,
        b,
        np.divide,
        lambda g, x, y: g / np.broadcast_to(y, g.shape),
        lambda g, x, y: -g * np.broadcast_to(x, g.shape) / np.broadcast_to(y, g.shape) ** 2,
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)
    return _result(data, (x,), lambda g: (0.5 * g / data,))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


GELU_SCALE = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = as_tensor(x)
    inner = GELU_SCALE * (x.data + GELU_CUBIC * x.data ** 3)
    tanh = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + tanh)

    def backward(g):
        dinner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x.data ** 2)
        return (g * (0.5 * (1.0 + tanh) + 0.5 * x.data * (1.0 - tanh ** 2) * dinner),)

    return _result(data, (x,), backward)


def matmul(a: t.Any, b: t.Any) -> Tensor:
    """
    Matrix product of `a` (m×k) and `b` (k×n).

    Examples:

        >>> matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data.tolist()
        [[3.0], [7.0]]

        >>> matmul(np.ones((2, 3)), np.ones((2, 3)))
        Traceback (most recent call last):
          ...
        diffmesh.errors.DimensionError: Cannot multiply shapes (2, 3) and (2, 3)
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """
    Softmax along the last axis, shifted by the row maximum.

    Examples:

        >>> softmax_rows([[0.0, math.log(3.0)]]).data.round(12).tolist()
        [[0.25, 0.75]]
    """
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _result(data, (x,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize the last axis to zero mean and unit variance, then apply the
    affine `gain` and `bias`.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if width < 2 or gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"Cannot normalize shape {x.shape} with gain {gain.shape} and "
            f"bias {bias.shape}"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    data = normed * gain.data + bias.data

    def backward(g):
        grad_x = None
        if x.requires_grad:
            dnormed = g * gain.data
            grad_x = inv_std * (
                dnormed
                - dnormed.mean(axis=-1, keepdims=True)
                - normed * (dnormed * normed).mean(axis=-1, keepdims=True)
            )
        return (
            grad_x,
            _unbroadcast(g * normed, gain.shape) if gain.requires_grad else None,
            _unbroadcast(g, bias.shape) if bias.requires_grad else None,
        )

    return _result(data, (x, gain, bias), backward)


def _scatter_add(values: Array, index: Array, rows: int) -> Array:
    out = np.zeros((rows,) + values.shape[index.ndim :], dtype=DTYPE)
    valid = index >= 0
    np.add.at(out, index[valid], values[valid])
    return out


def _gather(values: Array, index: Array) -> Array:
    out = values[np.where(index >= 0, index, 0)]
    out[index < 0] = 0.0
    return out


def gather_rows(x: Tensor, index: t.Any) -> Tensor:
    """
    Select rows of `x` by integer `index` of any shape. Negative indices
    select a row of zeros.

    Examples:

        >>> gather_rows([[1.0, 2.0], [3.0, 4.0]], [1, -1, 0]).data.tolist()
        [[3.0, 4.0], [0.0, 0.0], [1.0, 2.0]]
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and index.max() >= x.shape[0]:
        raise DimensionError(
            f"Row index {int(index.max())} out of range for shape {x.shape}"
        )
    return _result(
        _gather(x.data, index),
        (x,),
        lambda g: (_scatter_add(g, index, x.shape[0]),),
    )


def scatter_add_rows(x: Tensor, index: t.Any, rows: int) -> Tensor:
    """
    Sum the rows of `x` into a tensor with `rows` rows, row `i` of `x` going
    to row `index[i]`. The adjoint of `gather_rows`.

    Examples:

        >>> scatter_add_rows([[1.0], [2.0], [4.0]], [0, 1, 0], 2).data.tolist()
        [[5.0], [2.0]]
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[: index.ndim] or (index.size and index.max() >= rows):
        raise DimensionError(
            f"Cannot scatter shape {x.shape} by index {index.shape} into {rows} rows"
        )
    return _result(
        _scatter_add(x.data, index, rows),
        (x,),
        lambda g: (_gather(g, index),),
    )


def reshape(x: Tensor, shape: Shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose_last_two(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def sum_all(x: Tensor, axis: t.Optional[int] = None) -> Tensor:
    """Sum over `axis`, or over everything when `axis` is None."""
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(data, (x,), backward)


def mean(x: Tensor, axis: t.Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum_all(x, axis=axis), 1.0 / count)


def mse(a: t.Any, b: t.Any) -> Tensor:
    """Mean squared difference."""
    return mean(square(sub(a, b)))


class ParamStore:
    """
    Named parameters of a model together with their AdamW state. Names are
    unique; iteration follows insertion order, which is also the order of
    the serialized file.

    Examples:

        >>> store = ParamStore()
        >>> w = store.add("layer.weight", np.ones((2, 2)))
        >>> store.names()
        ['layer.weight']
        >>> ParamStore.loads(store.dumps()).dumps() == store.dumps()
        True
    """

    def __init__(self):
        self.params: "collections.OrderedDict[str, Tensor]" = collections.OrderedDict()
        self.moments: t.Dict[str, t.List[t.Any]] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> t.List[str]:
        return list(self.params)

    def items(self) -> t.Iterator[t.Tuple[str, Tensor]]:
        return iter(self.params.items())

    def add(self, name: str, data: t.Any, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise StateError(f"Duplicate parameter name: {name}")
        param = Tensor(data, requires_grad=requires_grad)
        self.params[name] = param
        return param

    def trainable(self) -> t.List[t.Tuple[str, Tensor]]:
        return [(name, p) for name, p in self.params.items() if p.requires_grad]

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def set_trainable(self, predicate: t.Callable[[str], bool]):
        """Train exactly the parameters whose name satisfies `predicate`."""
        for name, param in self.params.items():
            param.requires_grad = bool(predicate(name))

    def freeze(self, prefix: str = ""):
        """Freeze every parameter outside `prefix`; an empty prefix unfreezes all."""
        self.set_trainable(lambda name: name.startswith(prefix))

    def count(self) -> int:
        return sum(param.data.size for param in self.params.values())

    def state_entries(self) -> t.Iterator[t.Tuple[str, Array]]:
        """Yield all serialized entries: parameters, then optimizer state."""
        for name, param in self.params.items():
            yield name, param.data
        for name, (first, second, count) in self.moments.items():
            yield f"optim.m.{name}", first
            yield f"optim.v.{name}", second
            yield f"optim.t.{name}", np.array(float(count))

    def dumps(self) -> bytes:
        """Serialize to the DMV1 binary layout."""
        entries = list(self.state_entries())
        chunks = [PARAMS_MAGIC, struct.pack("<I", len(entries))]
        for name, data in entries:
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", data.ndim))
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
            chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def loads(cls, blob: bytes) -> "ParamStore":
        """Parse a store from the DMV1 binary layout."""
        reader = _Reader(blob)
        if reader.take(4) != PARAMS_MAGIC:
            raise FormatError("Not a parameter file: bad magic bytes")
        store = cls()
        moments: t.Dict[str, t.Dict[str, Array]] = collections.defaultdict(dict)
        for _ in range(reader.unpack("<I")):
            name = reader.take(reader.unpack("<I")).decode("utf-8")
            rank = reader.unpack("<I")
            shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
            if name.startswith("optim."):
                _, kind, param_name = name.split(".", 2)
                moments[param_name][kind] = data.astype(DTYPE)
            else:
                store.add(name, data.astype(DTYPE))
        for name, state in moments.items():
            store.moments[name] = [state["m"], state["v"], int(state["t"])]
        reader.finish()
        return store

    def save(self, path: str):
        with transaction(path) as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    def load_values(self, other: "ParamStore", strict: bool = True):
        """
        Copy values and optimizer state of matching names from `other`. With
        `strict`, both stores must hold exactly the same names and shapes.
        """
        if strict and other.names() != self.names():
            missing = sorted(set(self.names()) ^ set(other.names()))
            raise FormatError(f"Parameter names do not match: {', '.join(missing)}")
        for name, param in other.items():
            if name not in self.params:
                continue
            if self.params[name].shape != param.shape:
                raise FormatError(
                    f"Parameter {name} has shape {param.shape}, expected "
                    f"{self.params[name].shape}"
                )
            self.params[name].data = param.data.copy()
            if name in other.moments:
                first, second, count = other.moments[name]
                self.moments[name] = [first.copy(), second.copy(), count]


class _Reader:
    """Cursor over a bytes blob that fails loudly on truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise FormatError(
                f"Truncated file: wanted {size} bytes at offset {self.offset}, "
                f"only {len(self.blob) - self.offset} left"
            )
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> t.Any:
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return value

    def finish(self):
        if self.offset != len(self.blob):
            raise FormatError(
                f"Trailing data: {len(self.blob) - self.offset} unread bytes"
            )


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: t.Tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
):
    """
    Update every trainable parameter with Adam and decoupled weight decay:
    w ← w − lr·(m̂/(√v̂ + eps) + weight_decay·w).

    Examples:

        >>> store = ParamStore()
        >>> w = store.add("w", 1.0)
        >>> w.grad = np.array(1.0)
        >>> adamw_step(store, lr=0.1, weight_decay=0.0)
        >>> round(w.item(), 6)
        0.9
    """
    beta1, beta2 = betas
    trainable = store.trainable()
    for name, param in trainable:
        if param.grad is None:
            raise StateError(f"Parameter {name} has no gradient")
    for name, param in trainable:
        if name not in store.moments:
            store.moments[name] = [np.zeros_like(param.data), np.zeros_like(param.data), 0]
        state = store.moments[name]
        state[2] += 1
        state[0] = beta1 * state[0] + (1.0 - beta1) * param.grad
        state[1] = beta2 * state[1] + (1.0 - beta2) * param.grad ** 2
        first = state[0] / (1.0 - beta1 ** state[2])
        second = state[1] / (1.0 - beta2 ** state[2])
        param.data = param.data - lr * (first / (np.sqrt(second) + eps) + weight_decay * param.data)
    store.step += 1


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """
    Scale all trainable gradients so their global norm is at most
    `max_norm`. Returns the norm before clipping.
    """
    grads = [p.grad for _, p in store.trainable() if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        logger.debug("Clipping gradient norm %.6g to %.6g", total, max_norm)
        factor = max_norm / total
        for _, param in store.trainable():
            if param.grad is not None:
                param.grad = param.grad * factor
    return total


def grad_check(
    f: t.Callable[..., Tensor],
    inputs: t.Sequence[Tensor],
    h: float = 1e-6,
    coordinates: t.Optional[int] = None,
) -> float:
    """
    Compare the gradients `backward` computes for `f(*inputs)` with central
    finite differences and return the largest
    |analytic − numeric| / max(1, |analytic|). With `coordinates`, only that
    many evenly strided coordinates per input are checked.

    Examples:

        >>> x = Tensor([1.0, 2.0], requires_grad=True)
        >>> grad_check(lambda x: sum_all(square(x)), [x]) < 1e-8
        True
        >>> x.grad.tolist()
        [2.0, 4.0]
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None
    f(*inputs).backward()
    analytic = [
        np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.copy()
        for tensor in inputs
    ]
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            stride = 1
            if coordinates and flat.size > coordinates:
                stride = flat.size // coordinates
            for i in range(0, flat.size, stride):
                original = flat[i]
                flat[i] = original + h
                upper = f(*inputs).item()
                flat[i] = original - h
                lower = f(*inputs).item()
                flat[i] = original
                numeric = (upper - lower) / (2.0 * h)
                exact = grad.reshape(-1)[i]
                worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    return worst


class Rng:
    """
    Counter-based random stream. Uniform draws come from numpy's Philox
    generator keyed by `(seed, stream)`; Gaussian draws are derived from them
    with the Box–Muller transform, so identical `(seed, stream)` and call
    sequences give identical outputs.

    Examples:

        >>> Rng(7).normal((3,)).tolist() == Rng(7).normal((3,)).tolist()
        True
        >>> Rng(7).normal((3,)).tolist() == Rng(8).normal((3,)).tolist()
        False
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        self.generator = np.random.Generator(
            np.random.Philox(key=self.seed | (self.stream << 64))
        )

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def substream(self, index: int) -> "Rng":
        """Return an independent stream derived from this one and `index`."""
        stream = (self.stream * 0x9E3779B97F4A7C15 + int(index) + 1) & MASK64
        return Rng(self.seed, stream)

    def uniform(self, shape: Shape = ()) -> Array:
        return self.generator.random(shape)

    def normal(self, shape: Shape = ()) -> Array:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self.generator.random(pairs)
        u2 = self.generator.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        draws = np.empty(2 * pairs, dtype=DTYPE)
        draws[0::2] = radius * np.cos(angle)
        draws[1::2] = radius * np.sin(angle)
        if not shape:
            return draws[0]
        return draws[:count].reshape(shape)

    def integers(self, low: int, high: int, size: t.Optional[int] = None) -> t.Any:
        """Draw integers uniformly from `low` to `high`, both inclusive."""
        return self.generator.integers(low, high + 1, size=size)

    def permutation(self, count: int) -> Array:
        return self.generator.permutation(count)
