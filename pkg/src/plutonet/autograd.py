"""Minimal reverse-mode automatic differentiation over NumPy arrays.

A :class:`Tensor` wraps an ndarray and records the ops applied to it in a
dynamic tape; ``Tensor.backward()`` walks the tape in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.
Heavy ops (convolutions, resampling) delegate to :mod:`plutonet.kernels`;
everything else is vectorized NumPy. Arrays may be float32 or float64 and
ops preserve the input dtype, so the same graph code runs in float64 for
finite-difference checks.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


def grad_enabled():
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, prediction)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------
    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def astensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b):
    """Wrap python scalars with the companion tensor's dtype so float32
    graphs are not silently promoted to float64."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)) and np.isscalar(b):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)) and np.isscalar(a):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return astensor(a), astensor(b)


def _make(data, parents, backward):
    """Build an op output, recording the tape only when grads are live."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after NumPy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def sub(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def div(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a, p):
    a = astensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


# -- reductions and shape ops ------------------------------------------


def tensor_sum(x, axis=None, keepdims=False):
    x = astensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    return _make(out_data, (x,), backward)


def tensor_mean(x, axis=None, keepdims=False):
    x = astensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, *shape):
    x = astensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def concat(tensors, axis=1):
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- activations --------------------------------------------------------


def relu(x):
    x = astensor(x)
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward)


def _sigmoid_raw(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = astensor(x)
    s = _sigmoid_raw(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s))

    return _make(s, (x,), backward)


def swish(x):
    """x * sigmoid(x), the activation used by the standard encoder."""
    x = astensor(x)
    s = _sigmoid_raw(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (s + x.data * s * (1.0 - s)))

    return _make(x.data * s, (x,), backward)


# -- neural-network primitives ------------------------------------------


def linear(x, weight, bias=None):
    """x (B,Cin) @ weight (Cout,Cin)^T + bias."""
    x, weight = astensor(x), astensor(weight)
    parents = [x, weight]
    out_data = x.data @ weight.data.T
    if bias is not None:
        bias = astensor(bias)
        parents.append(bias)
        out_data = out_data + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _make(out_data, parents, backward)


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0)):
    x, weight = astensor(x), astensor(weight)
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"conv2d expects {weight.data.shape[1]} input channels, got {x.data.shape[1]}"
        )
    parents = [x, weight]
    if bias is not None:
        bias = astensor(bias)
        parents.append(bias)
    out_data = kernels.conv2d_forward(
        x.data, weight.data, None if bias is None else bias.data, stride, padding
    )

    def backward(g):
        dx, dw, db = kernels.conv2d_backward(
            x.data, weight.data, stride, padding, g, with_bias=bias is not None
        )
        if x.requires_grad:
            x.accumulate_grad(dx)
        if weight.requires_grad:
            weight.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(db)

    return _make(out_data, parents, backward)


def depthwise_conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0)):
    x, weight = astensor(x), astensor(weight)
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d expects {weight.data.shape[0]} channels, got {x.data.shape[1]}"
        )
    parents = [x, weight]
    if bias is not None:
        bias = astensor(bias)
        parents.append(bias)
    out_data = kernels.depthwise2d_forward(
        x.data, weight.data, None if bias is None else bias.data, stride, padding
    )

    def backward(g):
        dx, dw, db = kernels.depthwise2d_backward(
            x.data, weight.data, stride, padding, g, with_bias=bias is not None
        )
        if x.requires_grad:
            x.accumulate_grad(dx)
        if weight.requires_grad:
            weight.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(db)

    return _make(out_data, parents, backward)


def resize_bilinear(x, out_h, out_w):
    """Differentiable bilinear resampling to (out_h, out_w)."""
    x = astensor(x)
    if x.data.shape[2] == out_h and x.data.shape[3] == out_w:
        return x
    in_h, in_w = x.data.shape[2], x.data.shape[3]
    out_data = kernels.resize_bilinear_forward(x.data, out_h, out_w)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(kernels.resize_bilinear_backward(g, in_h, in_w))

    return _make(out_data, (x,), backward)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Channel-wise batch normalization for (B,C,H,W) tensors.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (biased variance for normalization, unbiased for the
    running estimate). Evaluation mode is a fixed affine map using the
    running buffers and never mutates them.
    """
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    xd = x.data
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(np.einsum("bchw,bchw->c", g, xhat))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                g_mean = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gx_mean = np.einsum("bchw,bchw->c", g, xhat)[None, :, None, None] / n
                x.accumulate_grad(scale * (g - g_mean - xhat * gx_mean))
            else:
                x.accumulate_grad(scale * g)

    return _make(out_data, (x, gamma, beta), backward)
