"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus a closure that scatters its output gradient
back to its parents; backward() walks the tape in reverse topological order.
The op set is exactly what the models in this package need — convolutions
(via the im2col/col2im kernels), batched matmul, normalization arithmetic,
softmax/silu/sigmoid, shape surgery — nothing speculative.

Dtypes are preserved end to end: float32 graphs stay float32 (training),
float64 graphs stay float64 (used by the finite-difference gradient tests).
"""

import numpy as np

from .. import _kernels

__all__ = [
    "Tensor", "concat", "matmul", "conv2d", "softmax", "silu", "sigmoid",
    "upsample_nearest2x", "group_norm",
]


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- construction helpers -------------------------------------------
    @staticmethod
    def param(data):
        return Tensor(np.asarray(data), requires_grad=True)

    @staticmethod
    def lift(x, dtype):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    # -- tape -------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def _accumulate(self, grad):
        # never mutate in place: the incoming array may be aliased by (or be
        # a view of) another tensor's gradient
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = Tensor.lift(other, self.dtype)
        out_data = self.data + other.data
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        return Tensor(out_data, req, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)
        return Tensor(-self.data, self.requires_grad, (self,), bwd)

    def __sub__(self, other):
        return self + (-Tensor.lift(other, self.dtype))

    def __rsub__(self, other):
        return Tensor.lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = Tensor.lift(other, self.dtype)
        out_data = self.data * other.data
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        return Tensor(out_data, req, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.lift(other, self.dtype)
        return self * other.pow(-1.0)

    def pow(self, exponent):
        """Elementwise power with a constant exponent."""
        e = float(exponent)
        out_data = self.data ** e

        def bwd(g):
            self._accumulate(g * e * self.data ** (e - 1.0))
        return Tensor(out_data, self.requires_grad, (self,), bwd)

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accumulate(g * out_data)
        return Tensor(out_data, self.requires_grad, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accumulate(g / self.data)
        return Tensor(np.log(self.data), self.requires_grad, (self,), bwd)

    def sqrt(self):
        return self.pow(0.5)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())
        return Tensor(out_data, self.requires_grad, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape surgery --------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accumulate(g.reshape(self.data.shape))
        return Tensor(out_data, self.requires_grad, (self,), bwd)

    def transpose(self, axes):
        inv = tuple(np.argsort(axes))

        def bwd(g):
            self._accumulate(g.transpose(inv))
        return Tensor(self.data.transpose(axes), self.requires_grad,
                      (self,), bwd)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bwd(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            self._accumulate(full)
        return Tensor(out_data, self.requires_grad, (self,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    return Tensor(out_data, req, tuple(tensors), bwd)


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    out_data = np.matmul(a.data, b.data)
    req = a.requires_grad or b.requires_grad

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, _swap_last(b.data)),
                                       a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(_swap_last(a.data), g),
                                       b.data.shape))
    return Tensor(out_data, req, (a, b), bwd)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation: x (B,C,H,W) with w (CO,C,KH,KW).

    Lowered to im2col + GEMM; the backward pass reuses the gathered columns
    and scatters input gradients with col2im (the exact adjoint).
    """
    B, C, H, W = x.data.shape
    CO, CI, KH, KW = w.data.shape
    if CI != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {CI}")
    cols = _kernels.im2col(x.data, KH, KW, stride, pad)      # (B, C*KH*KW, L)
    w2 = w.data.reshape(CO, -1)
    out = np.matmul(w2, cols)                                # (B, CO, L)
    OH = _kernels.conv_out_size(H, KH, stride, pad)
    OW = _kernels.conv_out_size(W, KW, stride, pad)
    out = out.reshape(B, CO, OH, OW)
    if bias is not None:
        out = out + bias.data.reshape(1, CO, 1, 1)
    req = x.requires_grad or w.requires_grad or \
        (bias is not None and bias.requires_grad)
    parents = (x, w) + ((bias,) if bias is not None else ())

    def bwd(g):
        g2 = g.reshape(B, CO, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            # fold batch into the contraction so it is a single GEMM
            gflat = g2.transpose(1, 0, 2).reshape(CO, -1)
            cflat = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
            w._accumulate(np.matmul(gflat, cflat.T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x._accumulate(_kernels.col2im(dcols, x.data.shape, KH, KW,
                                          stride, pad))
    return Tensor(out, req, parents, bwd)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        x._accumulate(g * out_data * (1.0 - out_data))
    return Tensor(out_data, x.requires_grad, (x,), bwd)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * s

    def bwd(g):
        x._accumulate(g * s * (1.0 + x.data * (1.0 - s)))
    return Tensor(out_data, x.requires_grad, (x,), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))
    return Tensor(out_data, x.requires_grad, (x,), bwd)


def upsample_nearest2x(x):
    """Nearest-neighbour 2x spatial upsampling of (B,C,H,W)."""
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        B, C, H2, W2 = g.shape
        x._accumulate(g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))
    return Tensor(out_data, x.requires_grad, (x,), bwd)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over (B,C,H,W), composed from differentiable primitives."""
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"channels {C} not divisible by {groups} groups")
    xg = x.reshape(B, groups, (C // groups) * H * W)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    xn = centered * (var + eps).pow(-0.5)
    xn = xn.reshape(B, C, H, W)
    return xn * gamma.reshape(1, C, 1, 1) + beta.reshape(1, C, 1, 1)
