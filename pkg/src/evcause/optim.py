"""Trainable-parameter registry, Glorot initialisation, and the Adam update."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, tensor_sum
from .errors import ConsistencyError, DimensionError, ParameterError


def glorot_init(shape, seed) -> Tensor:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out)), deterministic per seed.

    ``fan_in`` is the first dimension and ``fan_out`` the last; a 1-d shape
    uses its single dimension for both. ``seed`` may be an int or an already
    constructed ``numpy.random.Generator``.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) < 1 or any(d < 1 for d in shape):
        raise ParameterError(f"glorot_init needs a nonempty positive shape, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fan_in = shape[0]
    fan_out = shape[-1] if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape))


class ParamStore:
    """Named map of trainable tensors plus per-parameter Adam moment buffers.

    The step count is shared by all parameters of one store, so a store is
    one optimiser instance.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConsistencyError(f"parameter {name!r} registered twice")
        tensor = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None

    def l2_penalty(self) -> Tensor:
        """Sum of squared entries over every registered parameter."""
        total = Tensor(0.0)
        for tensor in self._params.values():
            total = total + tensor_sum(tensor * tensor)
        return total

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise ConsistencyError(
                f"parameter names disagree: missing {missing}, unexpected {extra}"
            )
        for name, tensor in self._params.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != tensor.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {incoming.shape} does not "
                    f"match model shape {tensor.data.shape}"
                )
            tensor.data = incoming.copy()


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place; increments the shared step."""
    if set(grads) != set(store._params):
        missing = sorted(set(store._params) - set(grads))
        extra = sorted(set(grads) - set(store._params))
        raise ConsistencyError(f"gradient keys disagree: missing {missing}, unexpected {extra}")
    store.step_count += 1
    t = store.step_count
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, tensor in store._params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {tensor.data.shape}"
            )
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
