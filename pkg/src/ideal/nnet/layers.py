"""Layers with explicit forward/backward passes over NHWC arrays.

Every layer caches what it needs from the last forward call so that
``backward`` can be called once afterwards. Parameters live in ``params``
and their gradients, after ``backward``, in ``grads`` under the same keys.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, dropout=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


def he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _im2col(x, k):
    """(N,H,W,C) -> (N,H,W,k*k*C) patches of a 'same'-padded k x k kernel.

    Columns are ordered (tap_row, tap_col, channel).
    """
    p = k // 2
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    if c == 1:
        win = sliding_window_view(xp[..., 0], (k, k), axis=(1, 2))
        return win.reshape(n, h, w, k * k)
    return np.concatenate([xp[:, di:di + h, dj:dj + w, :]
                           for di in range(k) for dj in range(k)], axis=-1)


def _col2im_matmul(g, weights, shape, k):
    """Input gradient of a 'same' convolution: scatter ``g @ W_tap.T`` per tap.

    ``g`` is (N,H,W,C_out); ``weights`` is (k*k*C_in, C_out) in the layout of
    :func:`_im2col`.
    """
    n, h, w, c = shape
    p = k // 2
    g2 = g.reshape(-1, weights.shape[1])
    wt = weights.reshape(k * k, c, -1)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=g.dtype)
    t = 0
    for di in range(k):
        for dj in range(k):
            out[:, di:di + h, dj:dj + w, :] += (g2 @ wt[t].T).reshape(n, h, w, c)
            t += 1
    return out[:, p:p + h, p:p + w, :]


class Conv2D(Layer):
    """Stride-1 'same' convolution, weights stored as (C_in*k*k, C_out)."""

    def __init__(self, in_channels, out_channels, kernel=3, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        self.params["W"] = he_uniform(rng, fan_in, (fan_in, out_channels))
        self.use_bias = bias
        if bias:
            self.params["b"] = np.zeros(out_channels)
        self.zero_grad()

    def forward(self, x, dropout=False, rng=None):
        self._shape = x.shape
        self._cols = _im2col(x, self.kernel)
        out = self._cols @ self.params["W"]
        if self.use_bias:
            out = out + self.params["b"]
        return out

    def backward(self, grad, input_grad=True):
        n, h, w, _ = self._shape
        g2 = grad.reshape(-1, self.out_channels)
        cols = self._cols.reshape(n * h * w, -1)
        self.grads["W"] = cols.T @ g2
        if self.use_bias:
            self.grads["b"] = g2.sum(axis=0)
        if not input_grad:
            return None
        return _col2im_matmul(grad, self.params["W"], self._shape, self.kernel)

    def conv(self, x, weights):
        """Bias-free convolution of ``x`` with an arbitrary weight matrix."""
        return _im2col(x, self.kernel) @ weights

    def conv_transpose(self, g, weights, shape):
        return _col2im_matmul(g, weights, shape, self.kernel)


class Dense(Layer):
    def __init__(self, n_in, n_out, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = he_uniform(rng, n_in, (n_in, n_out))
        self.use_bias = bias
        if bias:
            self.params["b"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x, dropout=False, rng=None):
        self._x = x
        out = x @ self.params["W"]
        if self.use_bias:
            out = out + self.params["b"]
        return out

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        if self.use_bias:
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x, dropout=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    def forward(self, x, dropout=False, rng=None):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, grad):
        return grad * self._y * (1.0 - self._y)


class Dropout(Layer):
    """Inverted dropout: active only when ``dropout=True`` is passed to forward."""

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, dropout=False, rng=None):
        if not dropout or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout requires an rng")
        # 16-bit uniform draws: keep-probability resolution 2**-16
        bits = np.frombuffer(rng.bytes(2 * x.size), dtype=np.uint16).reshape(x.shape)
        keep = bits >= np.uint16(round(self.p * 65536))
        self._mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class MaxPool2(Layer):
    """2x2/stride-2 max pooling; ties resolve to the first element of the window
    in row-major order."""

    def forward(self, x, dropout=False, rng=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"MaxPool2 needs even spatial dims, got {h}x{w}")
        q = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
        out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for part in q:
            m = (part == out) & ~taken
            taken |= m
            masks.append(m)
        self._masks = masks
        self._shape = x.shape
        return out

    def route(self, grad):
        """Send ``grad`` (pooled shape) to the argmax input of each window."""
        out = np.zeros(self._shape, dtype=grad.dtype)
        m = self._masks
        out[:, 0::2, 0::2] = grad * m[0]
        out[:, 0::2, 1::2] = grad * m[1]
        out[:, 1::2, 0::2] = grad * m[2]
        out[:, 1::2, 1::2] = grad * m[3]
        return out

    def backward(self, grad):
        return self.route(grad)


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x, dropout=False, rng=None):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        n, h, w, c = grad.shape
        return grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class GlobalAvgPool(Layer):
    def forward(self, x, dropout=False, rng=None):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), self._shape).copy()


class Flatten(Layer):
    def forward(self, x, dropout=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential:
    """Ordered stack of layers sharing one forward/backward protocol."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, dropout=False, rng=None, keep=False):
        acts = [x]
        for layer in self.layers:
            x = layer.forward(x, dropout=dropout, rng=rng)
            if keep:
                acts.append(x)
        return (x, acts) if keep else x

    def backward(self, grad, input_grad=True):
        for layer in reversed(self.layers[1:]):
            grad = layer.backward(grad)
        first = self.layers[0]
        if isinstance(first, Conv2D):
            return first.backward(grad, input_grad=input_grad)
        return first.backward(grad)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, name, arr

    def gradients(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield i, name, layer.grads[name]
