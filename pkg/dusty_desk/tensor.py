"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every op is a ``Function`` with a numpy ``forward`` and a ``backward`` that is
itself written with differentiable ops. Running backward with
``create_graph=True`` therefore records a second graph, which is what the R1
penalty needs (gradient of a gradient norm).
"""

import contextlib
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def enable_grad(mode: bool = True) -> Iterator[None]:
    """Switch graph recording on (or off) inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = mode
    try:
        yield
    finally:
        _grad_enabled = previous


def no_grad() -> "contextlib.AbstractContextManager[None]":
    """Disable graph recording inside the block."""
    return enable_grad(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float32 array that can record the ops applied to it."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence[float]],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional["Function"] = None
        self.name = name

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other: "ArrayLike") -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: "ArrayLike") -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: "ArrayLike") -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: "ArrayLike") -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: "ArrayLike") -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: "ArrayLike") -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: "ArrayLike") -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, exponent=-1.0))
        return Mul.apply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other: "ArrayLike") -> "Tensor":
        return Mul.apply(other, Pow.apply(self, exponent=-1.0))

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, index: object) -> "Tensor":
        return GetItem.apply(self, index=index)

    # ------------------------------------------------------------------
    # Methods
    # ------------------------------------------------------------------

    def sum(
        self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
    ) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(
        self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
    ) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: Union[int, Tuple[int, ...]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def leaky_relu(self, slope: float) -> "Tensor":
        return LeakyReLU.apply(self, slope=slope)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def clamp(self, low: float, high: float) -> "Tensor":
        return Clamp.apply(self, low=low, high=high)

    def square(self) -> "Tensor":
        return Mul.apply(self, self)

    def backward(
        self, grad_output: Optional[np.ndarray] = None, retain_graph: bool = False
    ) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad_output is None:
            if self.size != 1:
                raise ConfigError("backward() on a non-scalar tensor needs grad_output")
            grad_output = np.ones(self.shape, dtype=DTYPE)
        order = _topological_order([self])
        grads = _backpropagate(self, Tensor(grad_output), order, create_graph=False)
        for node in order:
            if node.is_leaf and node.requires_grad and id(node) in grads:
                value = grads[id(node)].data
                node.grad = value.copy() if node.grad is None else node.grad + value
        if not retain_graph:
            _release(order)


ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape: Tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape: Tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


class Function:
    """One node of the recorded graph."""

    def __init__(self, **params: object):
        self.params = params
        self.inputs: Tuple[Tensor, ...] = ()
        self.needs_input_grad: Tuple[bool, ...] = ()

    @classmethod
    def apply(cls, *inputs: ArrayLike, **params: object) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        fn = cls(**params)
        out = np.asarray(fn.forward(*(t.data for t in tensors)), dtype=DTYPE)
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")

        tracked = _grad_enabled and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=tracked)
        if tracked:
            fn.inputs = tensors
            fn.needs_input_grad = tuple(t.requires_grad for t in tensors)
            result._ctx = fn
        return result

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError


# ----------------------------------------------------------------------
# Graph traversal
# ----------------------------------------------------------------------


def _topological_order(roots: Sequence[Tensor]) -> List[Tensor]:
    """Nodes ordered so that every node comes after all of its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False) for root in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _backpropagate(
    root: Tensor, seed: Tensor, order: List[Tensor], create_graph: bool
) -> Dict[int, Tensor]:
    grads: Dict[int, Tensor] = {id(root): seed}
    for node in reversed(order):
        grad_node = grads.get(id(node))
        if grad_node is None or node._ctx is None:
            continue
        fn = node._ctx
        with enable_grad(create_graph):
            input_grads = fn.backward(grad_node)
        for parent, needed, parent_grad in zip(fn.inputs, fn.needs_input_grad, input_grads):
            if not needed or parent_grad is None:
                continue
            if parent_grad.shape != parent.shape:
                raise DimensionError(
                    f"{type(fn).__name__} returned gradient {parent_grad.shape} "
                    f"for input {parent.shape}"
                )
            previous = grads.get(id(parent))
            if previous is None:
                grads[id(parent)] = parent_grad
            else:
                with enable_grad(create_graph):
                    grads[id(parent)] = previous + parent_grad
    return grads


def _release(order: List[Tensor]) -> None:
    for node in order:
        if node._ctx is not None:
            node._ctx = None
            node.requires_grad = False


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
    retain_graph: Optional[bool] = None,
) -> List[Tensor]:
    """Gradients of ``output`` with respect to ``inputs`` (zeros if unused).

    With ``create_graph=True`` the returned tensors are themselves part of a
    graph and can be differentiated again.
    """
    if grad_output is None:
        if output.size != 1:
            raise ConfigError("grad() of a non-scalar output needs grad_output")
        grad_output = ones(output.shape)
    if retain_graph is None:
        retain_graph = create_graph

    order = _topological_order([output])
    grads = _backpropagate(output, grad_output, order, create_graph=create_graph)
    results = [grads.get(id(t), zeros(t.shape)) for t in inputs]
    if not retain_graph:
        _release(order)
    return results


def grad_check(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    output = f(*inputs)
    if output.size != 1:
        raise ConfigError(f"grad_check needs a scalar function, got shape {output.shape}")
    analytic = [g.data.astype(np.float64) for g in grad(output, inputs)]

    worst = 0.0
    with no_grad():
        for tensor, exact in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            exact_flat = exact.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + DTYPE(eps)
                upper = float(flat[i])
                f_plus = f(*inputs).item()
                flat[i] = original - DTYPE(eps)
                lower = float(flat[i])
                f_minus = f(*inputs).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (upper - lower)
                error = abs(exact_flat[i] - numeric) / max(1.0, abs(exact_flat[i]))
                worst = max(worst, error)
    return worst


# ----------------------------------------------------------------------
# Shape helpers
# ----------------------------------------------------------------------


def _unbroadcast(grad_value: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if grad_value.shape == shape:
        return grad_value
    return SumTo.apply(grad_value, shape=shape)


def _constant(array: np.ndarray) -> Tensor:
    return Tensor(array)


# ----------------------------------------------------------------------
# Arithmetic
# ----------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return (
            _unbroadcast(grad, a.shape) if self.needs_input_grad[0] else None,
            _unbroadcast(grad, b.shape) if self.needs_input_grad[1] else None,
        )


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return (
            _unbroadcast(grad, a.shape) if self.needs_input_grad[0] else None,
            _unbroadcast(-grad, b.shape) if self.needs_input_grad[1] else None,
        )


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a * b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return (
            _unbroadcast(grad * b, a.shape) if self.needs_input_grad[0] else None,
            _unbroadcast(grad * a, b.shape) if self.needs_input_grad[1] else None,
        )


class Pow(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        exponent = self.params["exponent"]
        if exponent < 0 and np.any(x == 0):
            raise NumericError("negative power of zero")
        return np.power(x, DTYPE(exponent))

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        exponent = self.params["exponent"]
        return (grad * (x ** (exponent - 1.0)) * exponent,)


# ----------------------------------------------------------------------
# Pointwise nonlinearities
# ----------------------------------------------------------------------


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.exp(x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad * x.exp(),)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        return np.log(x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad / x,)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        y = x.tanh()
        return (grad * (1.0 - y * y),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        s = x.sigmoid()
        return (grad * s * (1.0 - s),)


class Softplus(Function):
    """log(1 + exp(x)), the building block of stable log-sigmoid losses."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.logaddexp(DTYPE(0.0), x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad * x.sigmoid(),)


class LeakyReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        slope = DTYPE(self.params["slope"])
        return np.where(x > 0, x, slope * x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        slope = DTYPE(self.params["slope"])
        return (grad * _constant(np.where(x.data > 0, DTYPE(1.0), slope)),)


class Abs(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.abs(x)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad * _constant(np.sign(x.data)),)


class Clamp(Function):
    """Clip into [low, high]; gradient passes only where the input was inside."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.params["low"], self.params["high"])

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        inside = (x.data >= self.params["low"]) & (x.data <= self.params["high"])
        return (grad * _constant(inside.astype(DTYPE)),)


# ----------------------------------------------------------------------
# Reductions and reshaping
# ----------------------------------------------------------------------


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.sum(x, axis=self.params["axis"], keepdims=self.params["keepdims"])

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        axis = self.params["axis"]
        if axis is None:
            kept = tuple(1 for _ in x.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(a % x.ndim for a in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
        return (grad.reshape(kept).broadcast_to(x.shape),)


class BroadcastTo(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(x, self.params["shape"]).copy()

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (_unbroadcast(grad, x.shape),)


class SumTo(Function):
    """Adjoint of broadcasting: sum a gradient back down to ``shape``."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        shape = self.params["shape"]
        lead = x.ndim - len(shape)
        out = x.sum(axis=tuple(range(lead))) if lead else x
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and out.shape[i] != 1)
        if axes:
            out = out.sum(axis=axes, keepdims=True)
        return out.reshape(shape)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad.broadcast_to(x.shape),)


class Reshape(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.params["shape"])

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (grad.reshape(x.shape),)


class GetItem(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.array(x[self.params["index"]])

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (ScatterSlice.apply(grad, index=self.params["index"], shape=x.shape),)


class ScatterSlice(Function):
    """Adjoint of indexing: place values into a zero array of ``shape``."""

    def forward(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.params["shape"], dtype=DTYPE)
        np.add.at(out, self.params["index"], g)
        return out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (grad[self.params["index"]],)


class Gather(Function):
    """out.flat[k] = x.flat[index.flat[k]], or 0 where the index is negative."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        index = self.params["index"]
        valid = index >= 0
        flat = x.reshape(-1)
        return np.where(valid, flat[np.where(valid, index, 0)], DTYPE(0.0))

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (x,) = self.inputs
        return (ScatterAdd.apply(grad, index=self.params["index"], shape=x.shape),)


class ScatterAdd(Function):
    """Adjoint of Gather."""

    def forward(self, g: np.ndarray) -> np.ndarray:
        index = self.params["index"]
        shape = self.params["shape"]
        valid = index >= 0
        out = np.zeros(int(np.prod(shape)), dtype=DTYPE)
        np.add.at(out, index[valid], g[valid])
        return out.reshape(shape)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (Gather.apply(grad, index=self.params["index"]),)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Differentiable flat-index gather; negative indices read as zero."""
    return Gather.apply(x, index=np.asarray(index, dtype=np.int64))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return x.leaky_relu(slope)


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def log(x: Tensor) -> Tensor:
    return x.log()
