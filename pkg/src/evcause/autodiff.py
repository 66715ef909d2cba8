"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Each differentiable operation records
its parent nodes and a rule mapping the output gradient to parent gradients.
``Tensor.backward`` replays those rules once per node in reverse topological
order and returns the replay order (the tape), so callers can verify that
every node's rule ran exactly once.

All arithmetic is 64-bit. Gradient arrays always have the same shape as the
tensors they belong to; broadcast operations sum gradients back down.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph replay ------------------------------------------------------

    def backward(self) -> list["Tensor"]:
        """Accumulate gradients of this scalar w.r.t. every ancestor.

        Returns the tape: nodes in the order their backward rules were
        replayed, each exactly once.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return []

        # Iterative post-order DFS; model graphs exceed the recursion limit.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        tape: list[Tensor] = []
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            tape.append(node)
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} does not match tensor shape "
                        f"{parent.data.shape} in backward of {node.op!r}"
                    )
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        return tape

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    """Wrap an op result, recording the graph only when gradients can flow."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs at least 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward, "matmul")


# -- shape manipulation -------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def take(x, idx) -> Tensor:
    """Numpy-style indexing; backward scatters with ``np.add.at``."""
    x = _as_tensor(x)
    data = x.data[idx]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, (x,), backward, "take")


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape),)

    return _result(data, (x,), backward, "sum")


def tensor_mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# -- pointwise nonlinearities -------------------------------------------------


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Split on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_array(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _result(t, (x,), backward, "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _result(data, (x,), backward, "relu")


def elementwise(name: str, *args) -> Tensor:
    """Dispatch by op name; binary ops require exactly equal shapes."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    binary = {"add": add, "hadamard": mul}
    if name in unary:
        if len(args) != 1:
            raise ParameterError(f"{name} takes one operand, got {len(args)}")
        return unary[name](args[0])
    if name in binary:
        if len(args) != 2:
            raise ParameterError(f"{name} takes two operands, got {len(args)}")
        a, b = _as_tensor(args[0]), _as_tensor(args[1])
        if a.data.shape != b.data.shape:
            raise DimensionError(
                f"{name} operand shapes differ: {a.data.shape} vs {b.data.shape}"
            )
        return binary[name](a, b)
    raise ParameterError(f"unknown elementwise operation {name!r}")


# -- structured operations ----------------------------------------------------


def dilated_causal_conv1d(x, filt, dilation: int) -> Tensor:
    """Causal convolution along the last axis with left zero-padding.

    ``out[..., s] = sum_k filt[..., k] * x[..., s - dilation*k]`` with
    out-of-range reads as zero, so the output length equals the input
    length. A 1-d filter applies to every row; a filter shaped like the
    leading axes of ``x`` (e.g. ``(channels, K)``) applies depthwise.
    """
    x, filt = _as_tensor(x), _as_tensor(filt)
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation!r}")
    if filt.data.ndim < 1 or filt.data.shape[-1] < 1:
        raise ParameterError(f"filter needs at least one tap, got shape {filt.data.shape}")
    length = x.data.shape[-1]
    taps = filt.data.shape[-1]
    lead = np.broadcast_shapes(x.data.shape[:-1], filt.data.shape[:-1])
    out = np.zeros(lead + (length,))
    for k in range(taps):
        shift = dilation * k
        if shift >= length:
            break
        out[..., shift:] += filt.data[..., k : k + 1] * x.data[..., : length - shift]

    def backward(g):
        gx = np.zeros(lead + (length,))
        gf = np.zeros(lead + (taps,))
        for k in range(taps):
            shift = dilation * k
            if shift >= length:
                break
            gx[..., : length - shift] += filt.data[..., k : k + 1] * g[..., shift:]
            gf[..., k] = (g[..., shift:] * x.data[..., : length - shift]).sum(axis=-1)
        return (_unbroadcast(gx, x.data.shape), _unbroadcast(gf, filt.data.shape))

    return _result(out, (x, filt), backward, "dilated_causal_conv1d")


def softmax_rows(x) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _result(s, (x,), backward, "softmax_rows")


BCE_CLAMP = 1e-7


def bce_elements(y_hat, y) -> Tensor:
    """Per-element binary cross-entropy with predictions clamped away from {0,1}."""
    y_hat = _as_tensor(y_hat)
    target = np.asarray(y, dtype=np.float64)
    p = np.clip(y_hat.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    data = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))

    def backward(g):
        inside = (y_hat.data > BCE_CLAMP) & (y_hat.data < 1.0 - BCE_CLAMP)
        dp = -target / p + (1.0 - target) / (1.0 - p)
        return (_unbroadcast(g * dp * inside, y_hat.data.shape),)

    return _result(data, (y_hat,), backward, "bce_elements")


def bce_loss(y_hat, y) -> Tensor:
    """Binary cross-entropy, summed when the inputs carry a batch."""
    return tensor_sum(bce_elements(y_hat, y))


def mmd_linear_sq(z_treated, z_control) -> Tensor:
    """Squared linear maximum mean discrepancy between two sets of vectors.

    Defined as the squared Euclidean distance between group means. An empty
    group yields a constant zero (no gradient): the distance is undefined on
    empty sets and skipping the batch is the least-bias choice.
    """
    z1, z0 = _as_tensor(z_treated), _as_tensor(z_control)
    if z1.data.ndim != 2 or z0.data.ndim != 2:
        raise DimensionError(
            f"expected 2-d vector sets, got shapes {z1.data.shape} and {z0.data.shape}"
        )
    if z1.data.shape[1] != z0.data.shape[1]:
        raise DimensionError(
            f"vector dimensions differ: {z1.data.shape} vs {z0.data.shape}"
        )
    if z1.data.shape[0] == 0 or z0.data.shape[0] == 0:
        return Tensor(0.0)
    diff = tensor_mean(z1, axis=0) - tensor_mean(z0, axis=0)
    return tensor_sum(diff * diff)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; kept units are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return _as_tensor(x)
    keep = (rng.random(np.shape(x.data if isinstance(x, Tensor) else x)) >= rate)
    mask = keep.astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(mask))
