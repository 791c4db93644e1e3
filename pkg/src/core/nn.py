"""Minimal reverse-mode differentiation over numpy arrays.

``Tensor`` wraps an array and records the operation that produced it. Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every tensor that requires them.

Only the operations the place recognition network needs are provided. Every
width-mixing operation is either position-wise or circular, so all kernels
commute with circular column shifts of their input.
"""

import logging
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import EquivarianceError, ShapeError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


ArrayLike = Union['Tensor', np.ndarray, float, int]


class Tensor:
    """Array with an optional gradient and the closure that back-propagates it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == 'f' else np.float32
        array = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = array if array.flags.c_contiguous else np.array(array, order='C')
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ''

    # ------------------------------------------------------------------
    # Graph plumbing
    # ------------------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence['Tensor'], op: str, backward) -> 'Tensor':
        out = Tensor(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def _lift(self, other: ArrayLike) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node._parents:
                # intermediate gradients are not needed once propagated
                node.grad = None if node is not self else node.grad

    # ------------------------------------------------------------------
    # Shape helpers
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op='{self._op}')"

    # ------------------------------------------------------------------
    # Elementwise arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> 'Tensor':
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)
        return Tensor._result(self.data + other.data, (self, other), '+', backward)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return self + other

    def __neg__(self) -> 'Tensor':
        return Tensor._result(-self.data, (self,), 'neg', lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)
        return Tensor._result(self.data - other.data, (self, other), '-', backward)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return self._lift(other) - self

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        other = self._lift(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        return Tensor._result(a * b, (self, other), '*', backward)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return self * other

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        other = self._lift(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)
        return Tensor._result(a / b, (self, other), '/', backward)

    def __rtruediv__(self, other: ArrayLike) -> 'Tensor':
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> 'Tensor':
        x = self.data
        out = x ** exponent

        def backward(g):
            return (g * exponent * x ** (exponent - 1),)
        return Tensor._result(out, (self,), f'**{exponent}', backward)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g
        return Tensor._result(a @ b, (self, other), '@', backward)

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)
        return Tensor._result(out, (self,), 'exp', lambda g: (g * out,))

    def log(self) -> 'Tensor':
        x = self.data
        return Tensor._result(np.log(x), (self,), 'log', lambda g: (g / x,))

    def relu(self) -> 'Tensor':
        x = self.data
        return Tensor._result(np.maximum(x, 0), (self,), 'relu', lambda g: (g * (x > 0),))

    def softplus(self) -> 'Tensor':
        x = self.data
        out = np.logaddexp(0, x).astype(x.dtype)

        def backward(g):
            return (g / (1 + np.exp(-x)),)
        return Tensor._result(out, (self,), 'softplus', backward)

    def clamp_min(self, floor: float) -> 'Tensor':
        x = self.data
        out = np.maximum(x, np.asarray(floor, dtype=x.dtype))
        return Tensor._result(out, (self,), 'clamp_min', lambda g: (g * (x >= floor),))

    # ------------------------------------------------------------------
    # Reductions and reshaping
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), 'sum', backward)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> 'Tensor':
        original = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,), 'reshape',
                              lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> 'Tensor':
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return Tensor._result(np.transpose(self.data, axes), (self,), 'transpose',
                              lambda g: (np.transpose(g, inverse),))

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def __getitem__(self, index) -> 'Tensor':
        shape, dtype = self.shape, self.dtype

        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)
        return Tensor._result(self.data[index], (self,), 'getitem', backward)


def _is_basic_index(index) -> bool:
    """True for ints and slices, which never select an element twice."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._result(out, tuple(tensors), 'concat', backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([t.reshape(1, *t.shape) for t in tensors], axis=0)


# ----------------------------------------------------------------------------
# Fused kernels
# ----------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._result(y, (x,), 'softmax', backward)


def layer_norm(x: Tensor, axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis``, no affine part."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std

    def backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)
    return Tensor._result(xhat.astype(x.dtype), (x,), 'layer_norm', backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, np.asarray(eps, dtype=x.dtype))
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)
    return Tensor._result(y, (x,), 'l2_normalize', backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Tuple[int, int] = (1, 1),
    width_padding: str = 'circular',
) -> Tensor:
    """Cross-correlation of a (c_in, h, w) input that keeps the width w.

    The width is padded circularly so that a circular column shift of the input
    shifts the output by the same amount.
    """
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = weight.shape
    sh, sw = stride
    check_conv_config(kw, stride, width_padding)
    if k_in != c_in:
        raise ShapeError(f"conv expects {k_in} input channels, got {c_in}")
    if kh > h:
        raise ShapeError(f"kernel height {kh} exceeds input height {h}")

    left = (kw - 1) // 2
    right = kw - 1 - left
    xp = x.data
    if kw > 1:
        xp = np.concatenate([x.data[:, :, w - left:], x.data, x.data[:, :, :right]], axis=2)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh]  # (c_in, ho, w, kh, kw)
    ho = windows.shape[1]
    out = np.tensordot(weight.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        d_weight = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        d_windows = np.tensordot(weight.data, g, axes=([0], [0]))  # (c_in, kh, kw, ho, w)
        d_xp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                d_xp[:, a:a + sh * (ho - 1) + 1:sh, b:b + w] += d_windows[:, a, b]
        d_x = d_xp[:, :, left:left + w].copy()
        if left:
            d_x[:, :, w - left:] += d_xp[:, :, :left]
        if right:
            d_x[:, :, :right] += d_xp[:, :, left + w:]
        grads = [d_x, d_weight]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads
    return Tensor._result(out.astype(x.dtype), parents, 'conv2d', backward)


def check_conv_config(kernel_width: int, stride: Tuple[int, int], width_padding: str):
    if width_padding not in ('circular', 'none'):
        raise EquivarianceError(f"equivariance violation: unknown width padding '{width_padding}'")
    if stride[1] != 1:
        raise EquivarianceError(f"equivariance violation: width stride {stride[1]} does not preserve width")
    if kernel_width > 1 and width_padding != 'circular':
        raise EquivarianceError(
            f"equivariance violation: kernel width {kernel_width} needs circular width padding")


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------

def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection. Inputs should
    be float64. ``max_checks`` limits the number of coordinates checked per input.
    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where the floor is 1e-3 of the largest analytic gradient (at least 1e-3).
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = op(*inputs)
    projection = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    projection = projection.astype(out.dtype)
    (out * Tensor(projection, dtype=out.dtype)).sum().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    largest = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in analytic)
    floor = 1e-3 * max(1.0, largest)

    def objective() -> float:
        with no_grad():
            return float(np.sum(op(*inputs).data.astype(np.float64) * projection))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for k in coords:
            original = flat[k]
            flat[k] = original + eps
            f_plus = objective()
            flat[k] = original - eps
            f_minus = objective()
            flat[k] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            exact = float(a.reshape(-1)[k])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    logger.debug("grad_check over %d inputs: max relative error %.3e", len(inputs), worst)
    return worst
