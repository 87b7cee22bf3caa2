"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations applied to it so
that ``backward()`` can accumulate gradients for every node of the graph,
parameters and inputs alike.  The op set is deliberately small: exactly what
the layers, the interval propagation and the loss functions need.

All ops preserve the dtype of their operands (float32 for training,
float64 for verification), so no silent precision changes occur inside a
graph.
"""

import numpy as np


class Tensor:
    """A node in the computation graph: value, gradient and provenance."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # ---- graph machinery ------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Propagate gradients from this node to every ancestor.

        ``grad`` seeds the output gradient; for scalar losses it defaults
        to 1.  Gradients accumulate additively, so callers reuse a graph
        only after zeroing.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {grad.shape} != value shape {self.data.shape}"
                )

        order = []
        seen = set()

        def visit(node):
            stack = [(node, iter(node._parents))]
            seen.add(id(node))
            while stack:
                cur, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                if not advanced:
                    order.append(cur)
                    stack.pop()

        visit(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by Tensor is not supported; multiply by a reciprocal")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = bw
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, (self,))
        out._backward = lambda g: self._accumulate(g.T)
        return out

    # ---- elementwise functions -------------------------------------------

    def exp(self):
        val = np.exp(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accumulate(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0).astype(self.dtype, copy=False), (self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def leaky_relu(self, slope):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, slope * self.data).astype(self.dtype, copy=False), (self,))
        out._backward = lambda g: self._accumulate(g * np.where(mask, 1.0, slope).astype(self.dtype))
        return out

    def pos_part(self):
        """max(x, 0); subgradient 0 at the kink."""
        return self.relu()

    def neg_part(self):
        """min(x, 0); carries gradient exactly where x < 0."""
        mask = self.data < 0
        out = Tensor(np.where(mask, self.data, 0.0).astype(self.dtype, copy=False), (self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def clip_min(self, floor):
        """max(x, floor) for a scalar floor; gradient only where x > floor."""
        mask = self.data > floor
        out = Tensor(np.where(mask, self.data, floor).astype(self.dtype, copy=False), (self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def sigmoid(self):
        val = _sigmoid_stable(self.data)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accumulate(g * val * (1.0 - val))
        return out

    def softplus(self):
        """log(1 + e^x) in the overflow-safe form max(x,0) + log1p(e^-|x|)."""
        d = self.data
        val = (np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))).astype(self.dtype, copy=False)
        out = Tensor(val, (self,))
        out._backward = lambda g: self._accumulate(g * _sigmoid_stable(d))
        return out

    # ---- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).astype(self.dtype, copy=False))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).astype(self.dtype, copy=False))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def vmax(self, axis):
        """Max along an axis; ties send the gradient to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        val = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        out = Tensor(val, (self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            self._accumulate(full)

        out._backward = bw
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid_stable(x):
    """Branching logistic evaluation; never overflows for large |x|."""
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))  # argument is always <= 0
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


# ---- structured ops ---------------------------------------------------------


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N, C, Hp, Wp) -> contiguous (N*OH*OW, C*kh*kw) patch matrix."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, oh, ow, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3))
    return np.ascontiguousarray(view).reshape(n * oh * ow, c * kh * kw)


def conv2d(x, kernel, bias, stride, padding):
    """Direct 2-D convolution via an explicit patch matrix and one GEMM.

    x: (N, C, H, W); kernel: (O, C, kh, kw); bias: (O,) or None.
    The reduction order is fixed by the patch layout, so repeated runs are
    bit-identical.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, got {c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("convolution output would be empty")

    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = kernel.data.reshape(o, c * kh * kw)
    prod = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        prod += bias.data
        parents = (x, kernel, bias)
    else:
        parents = (x, kernel)
    out = Tensor(prod.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), parents)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        kernel._accumulate((gmat.T @ cols).reshape(o, c, kh, kw))
        gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding > 0:
            x._accumulate(gxp[:, :, padding:padding + h, padding:padding + w])
        else:
            x._accumulate(gxp)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = bw
    return out


def avg_pool2d(x, window):
    """Non-overlapping average pooling; spatial dims must divide evenly."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % window or w % window:
        raise ValueError(f"pool window {window} does not divide spatial dims {h}x{w}")
    oh, ow = h // window, w // window
    val = x.data.reshape(n, c, oh, window, ow, window).mean(axis=(3, 5))
    out = Tensor(val, (x,))

    def bw(g):
        gx = np.repeat(np.repeat(g, window, axis=2), window, axis=3) / (window * window)
        x._accumulate(gx.astype(x.dtype, copy=False))

    out._backward = bw
    return out


def log_softmax(x, axis=1):
    """x - logsumexp(x) with a detached max shift for overflow safety."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    centered = x + Tensor(-shift)
    lse = centered.exp().sum(axis=axis, keepdims=True).log()
    return centered - lse
