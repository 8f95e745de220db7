"""Dense layer engine: 3D convolution, max-pooling, dense, activations.

Tensors are plain numpy arrays.  Every layer works on a leading batch axis;
the module-level functions (``conv3d``, ``maxpool3d``, ``dense``) also accept
a single unbatched sample.  Backward passes are written by hand and checked
against :func:`finite_diff_grad`.

Training runs in float32; ``Network.astype(np.float64)`` gives the double
precision copy used for gradient checks.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import NonFiniteError, ShapeError, StateError

GradientSet = list  # one array per entry of Network.parameters(), same shapes


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray
    kind: str  # "conv3d" or "dense"

    def __post_init__(self):
        w, b = self.weights, self.bias
        if self.kind == "conv3d":
            if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
                raise ShapeError(f"conv3d weights must be (out, in, k, k, k), got {w.shape}")
            if w.shape[2] % 2 != 1:
                raise ShapeError(f"conv3d kernel size must be odd, got {w.shape[2]}")
        elif self.kind == "dense":
            if w.ndim != 2:
                raise ShapeError(f"dense weights must be (out, in), got {w.shape}")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")

    def astype(self, dtype=None):
        if dtype is None:
            return LayerParams(self.weights.copy(), self.bias.copy(), self.kind)
        return LayerParams(self.weights.astype(dtype), self.bias.astype(dtype), self.kind)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(rng, in_channels, out_channels, k, dtype=np.float32):
    fan_in = in_channels * k**3
    w = he_uniform(rng, (out_channels, in_channels, k, k, k), fan_in, dtype)
    return LayerParams(w, np.zeros(out_channels, dtype=dtype), "conv3d")


def init_dense(rng, in_features, out_features, dtype=np.float32):
    w = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
    return LayerParams(w, np.zeros(out_features, dtype=dtype), "dense")


# ---------------------------------------------------------------------------
# layers


class Layer:
    params = None  # LayerParams for trainable layers

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        raise NotImplementedError

    def grads(self):
        return []


class Conv3D(Layer):
    def __init__(self, params, stride=1):
        if params.kind != "conv3d":
            raise ShapeError("Conv3D needs conv3d parameters")
        if stride < 1:
            raise ValueError("stride must be positive")
        self.params = params
        self.stride = stride
        self.k = params.weights.shape[2]
        self._cache = None
        self._grads = None

    def output_shape(self, shape):
        c, d = shape[0], shape[1]
        out_c, in_c = self.params.weights.shape[:2]
        if c != in_c:
            raise ShapeError(f"conv3d expects {in_c} input channels, got {c}")
        if d < self.k:
            raise ShapeError(f"conv3d kernel {self.k} larger than volume extent {d}")
        return (out_c,) + (_kernels.out_extent(d, self.k, self.stride),) * 3

    def forward(self, x, keep=True):
        B = x.shape[0]
        out_shape = self.output_shape(x.shape[1:])
        w = self.params.weights
        cols = _kernels.im2col3d(x, self.k, self.stride)
        out = w.reshape(w.shape[0], -1) @ cols
        out += self.params.bias[:, None]
        out = out.reshape((out_shape[0], B) + out_shape[1:]).transpose(1, 0, 2, 3, 4)
        if keep:
            self._cache = (x.shape, cols)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        if self._cache is None:
            raise StateError("Conv3D.backward called before forward")
        x_shape, cols = self._cache
        w = self.params.weights
        out_c = w.shape[0]
        gm = grad.transpose(1, 0, 2, 3, 4).reshape(out_c, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        db = gm.sum(axis=1)
        dcols = w.reshape(out_c, -1).T @ gm
        self._grads = [dw, db]
        return _kernels.col2im3d(dcols, x_shape, self.k, self.stride)

    def grads(self):
        return self._grads


class MaxPool3D(Layer):
    def __init__(self, window):
        if window < 1:
            raise ValueError("pool window must be positive")
        self.window = window
        self._arg = None

    def output_shape(self, shape):
        c, d = shape[0], shape[1]
        if d % self.window:
            raise ShapeError(f"pool window {self.window} does not divide extent {d}")
        return (c,) + (d // self.window,) * 3

    def forward(self, x, keep=True):
        self.output_shape(x.shape[1:])
        out, arg = _kernels.maxpool3d_forward(x, self.window)
        if keep:
            self._arg = arg
        return out

    def backward(self, grad):
        if self._arg is None:
            raise StateError("MaxPool3D.backward called before forward")
        return _kernels.maxpool3d_backward(grad, self._arg, self.window)


class Dense(Layer):
    def __init__(self, params):
        if params.kind != "dense":
            raise ShapeError("Dense needs dense parameters")
        self.params = params
        self._x = None
        self._grads = None

    def output_shape(self, shape):
        n_out, n_in = self.params.weights.shape
        if shape != (n_in,):
            raise ShapeError(f"dense expects input of length {n_in}, got shape {shape}")
        return (n_out,)

    def forward(self, x, keep=True):
        self.output_shape(x.shape[1:])
        if keep:
            self._x = x
        return x @ self.params.weights.T + self.params.bias

    def backward(self, grad):
        if self._x is None:
            raise StateError("Dense.backward called before forward")
        self._grads = [grad.T @ self._x, grad.sum(axis=0)]
        return grad @ self.params.weights

    def grads(self):
        return self._grads


class Activation(Layer):
    def __init__(self, kind):
        if kind not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._saved = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, keep=True):
        if self.kind == "relu":
            out = np.maximum(x, 0)
            saved = x > 0
        else:
            out = expit(x)
            saved = out
        if keep:
            self._saved = saved
        return out

    def backward(self, grad):
        if self._saved is None:
            raise StateError("Activation.backward called before forward")
        if self.kind == "relu":
            return grad * self._saved
        s = self._saved
        return grad * s * (1 - s)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, keep=True):
        if keep:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        if self._shape is None:
            raise StateError("Flatten.backward called before forward")
        return grad.reshape(self._shape)


# ---------------------------------------------------------------------------
# functional forms of the single-sample operations


def _batched(x, sample_ndim):
    x = np.asarray(x)
    if x.ndim == sample_ndim:
        return x[None], True
    return x, False


def conv3d(x, params, stride=1):
    xb, single = _batched(x, 4)
    out = Conv3D(params, stride).forward(xb, keep=False)
    return out[0] if single else out


def maxpool3d(x, window):
    xb, single = _batched(x, 4)
    out = MaxPool3D(window).forward(xb, keep=False)
    return out[0] if single else out


def dense(x, params):
    xb, single = _batched(x, 1)
    out = Dense(params).forward(xb, keep=False)
    return out[0] if single else out


def activate(x, kind):
    return Activation(kind).forward(np.asarray(x), keep=False)


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# networks


class Network:
    """An ordered list of layers evaluated front to back."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._last_input = None

    def forward(self, x, keep=True):
        if keep:
            self._last_input = x
        for layer in self.layers:
            x = layer.forward(x, keep=keep)
        return x

    __call__ = forward

    def backward(self, grad):
        """Propagate ``grad`` (w.r.t. the output) back; returns grad w.r.t. input."""
        if self._last_input is None:
            raise StateError("backward called before any forward pass")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def param_layers(self):
        return [layer for layer in self.layers if layer.params is not None]

    def parameters(self):
        out = []
        for layer in self.param_layers():
            out.extend([layer.params.weights, layer.params.bias])
        return out

    def gradients(self):
        out = []
        for layer in self.param_layers():
            g = layer.grads()
            if g is None:
                raise StateError("no gradients stored; run backward first")
            out.extend(g)
        return out

    def output_shape(self, shape):
        shape = tuple(shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        return shape

    def astype(self, dtype=None):
        """Deep copy with parameters cast to ``dtype`` (``None`` keeps dtypes)."""
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv3D):
                layers.append(Conv3D(layer.params.astype(dtype), layer.stride))
            elif isinstance(layer, Dense):
                layers.append(Dense(layer.params.astype(dtype)))
            elif isinstance(layer, MaxPool3D):
                layers.append(MaxPool3D(layer.window))
            elif isinstance(layer, Activation):
                layers.append(Activation(layer.kind))
            else:
                layers.append(type(layer)())
        return Network(layers)

    def copy(self):
        return self.astype()


def backward(network, x, loss_gradient):
    """Gradients of every parameter given d(loss)/d(output) for input ``x``.

    The forward pass for ``x`` must already have run with its intermediates
    kept; otherwise a :class:`StateError` is raised.
    """
    last = network._last_input
    if last is None or not (last is x or (last.shape == np.shape(x) and np.array_equal(last, x))):
        raise StateError("backward requires a retained forward pass for this input")
    network.backward(np.asarray(loss_gradient, dtype=last.dtype))
    return network.gradients()


def finite_diff_grad(network, x, loss, epsilon=1e-4):
    """Central-difference gradient of ``loss(network(x))`` for every parameter."""
    grads = []
    for p in network.parameters():
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss(network.forward(x, keep=False))
            flat[i] = orig - epsilon
            lo = loss(network.forward(x, keep=False))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * epsilon)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Max |a - n| / (|a| + |n|) over entries where |a| + |n| > ``floor``."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        scale = np.abs(a) + np.abs(n)
        mask = scale > floor
        if mask.any():
            worst = max(worst, float(np.max(np.abs(a - n)[mask] / scale[mask])))
    return worst


# ---------------------------------------------------------------------------
# optimisation


def sgd_update(params, grads, velocity, lr, momentum):
    """Classical momentum step, in place: ``v = m*v + g; w -= lr*v``."""
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ShapeError("params, grads and velocity must have equal length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {params[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient {i} (shape {g.shape}) has {bad} non-finite entries")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v


class SGD:
    def __init__(self, params, lr=0.01, momentum=0.9):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads):
        sgd_update(self.params, grads, self.velocity, self.lr, self.momentum)
