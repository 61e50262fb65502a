"""Parameter sets, Adam, and the equalized learning-rate scale."""

import contextlib
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LEARNING_RATE
from .errors import ConfigError, DimensionError, NumericError
from .tensor import DTYPE, Tensor


class ParamSet:
    """Named trainable tensors of one network, iterated in insertion order."""

    def __init__(self, role: str, params: Optional[Mapping[str, Tensor]] = None):
        self.role = role
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, tensor in (params or {}).items():
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}' in {self.role}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self._params.items()}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        unexpected = set(state) - set(self._params)
        if missing or unexpected:
            raise ConfigError(
                f"{self.role} state mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(unexpected)}"
            )
        for name, tensor in self._params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != tensor.shape:
                raise DimensionError(f"{name}: expected {tensor.shape}, got {value.shape}")
            tensor.data = value.copy()

    def copy(self, role: Optional[str] = None) -> "ParamSet":
        return ParamSet(
            role or self.role,
            OrderedDict((name, Tensor(t.data.copy())) for name, t in self._params.items()),
        )

    @contextlib.contextmanager
    def frozen(self) -> Iterator["ParamSet"]:
        """Stop gradients flowing into these parameters inside the block."""
        for tensor in self._params.values():
            tensor.requires_grad = False
        try:
            yield self
        finally:
            for tensor in self._params.values():
                tensor.requires_grad = True


class AdamState:
    """Moment buffers and hyperparameters for one ParamSet."""

    def __init__(
        self,
        params: ParamSet,
        lr: float = DEFAULT_LEARNING_RATE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }
        self.v: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load(self, hyper: Mapping[str, float], buffers: Mapping[str, np.ndarray]) -> None:
        self.lr = float(hyper["lr"])
        self.beta1 = float(hyper["beta1"])
        self.beta2 = float(hyper["beta2"])
        self.eps = float(hyper["eps"])
        self.step = int(hyper["step"])
        for name in self.m:
            self.m[name] = np.asarray(buffers[f"m.{name}"], dtype=DTYPE).copy()
            self.v[name] = np.asarray(buffers[f"v.{name}"], dtype=DTYPE).copy()


def adam_update(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns (value, m, v). ``step`` starts at 1."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value, m, v


def adam_step(
    params: ParamSet,
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
) -> ParamSet:
    """Apply one Adam update to every parameter in place."""
    state.step += 1
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ConfigError(f"missing gradient for trainable parameter '{name}'")
        if grad.shape != tensor.shape:
            raise DimensionError(f"{name}: gradient {grad.shape} vs parameter {tensor.shape}")
        value, m, v = adam_update(
            tensor.data,
            np.asarray(grad, dtype=DTYPE),
            state.m[name],
            state.v[name],
            state.step,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
        )
        if not np.isfinite(value).all():
            raise NumericError(f"Adam produced non-finite values in '{name}'")
        tensor.data = value.astype(DTYPE)
        state.m[name] = m.astype(DTYPE)
        state.v[name] = v.astype(DTYPE)
    return params


def he_constant(fan_in: int) -> float:
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


def equalized_scale(param: Tensor, fan_in: int) -> Tensor:
    """Runtime He scaling: weights are stored as N(0, 1) and used as param * sqrt(2 / fan_in)."""
    return param * he_constant(fan_in)
