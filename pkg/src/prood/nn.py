"""Feedforward networks: layer variants, shape checking and the
negative-weight output head used by the binary in/out discriminator.

Networks are plain layer stacks ending in a fully connected logit layer.
The discriminator appends a scalar head whose weights are materialized as
``-exp(h)``, keeping them strictly negative under any parameter update.
"""

import numpy as np

from .autodiff import Tensor, as_tensor, avg_pool2d, conv2d, log_softmax, _sigmoid_stable


class ShapeError(ValueError):
    """Layer shapes do not compose."""


# ---- layers -----------------------------------------------------------------


class FullyConnected:
    """y = x @ W.T + b with W of shape (out, in)."""

    def __init__(self, weight, bias):
        self.W = as_tensor(weight)
        self.b = as_tensor(bias)
        if self.W.data.ndim != 2:
            raise ShapeError("fully connected weight must be 2-D")
        if self.b.data.shape != (self.W.data.shape[0],):
            raise ShapeError("bias length must equal output dim")

    def parameters(self):
        return [self.W, self.b]

    def apply(self, x):
        return x @ self.W.T + self.b

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.W.data.shape[1]:
            raise ShapeError(f"fc expects ({self.W.data.shape[1]},), got {in_shape}")
        return (self.W.data.shape[0],)


class Conv2d:
    """Direct convolution; kernel (out_ch, in_ch, kh, kw)."""

    def __init__(self, kernel, bias, stride=1, padding=0):
        self.kernel = as_tensor(kernel)
        self.bias = as_tensor(bias)
        if self.kernel.data.ndim != 4:
            raise ShapeError("conv kernel must be 4-D")
        if stride < 1 or padding < 0:
            raise ShapeError("stride must be positive, padding nonnegative")
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return [self.kernel, self.bias]

    def apply(self, x):
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        o, c, kh, kw = self.kernel.data.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise ShapeError(f"conv expects ({c}, H, W), got {in_shape}")
        oh = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        ow = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError("conv output would be empty")
        return (o, oh, ow)


class ReLU:
    def parameters(self):
        return []

    def apply(self, x):
        return x.relu()

    def out_shape(self, in_shape):
        return in_shape


class LeakyReLU:
    def __init__(self, slope=0.01):
        if not 0.0 < slope < 1.0:
            raise ValueError("slope must lie in (0, 1)")
        self.slope = slope

    def parameters(self):
        return []

    def apply(self, x):
        return x.leaky_relu(self.slope)

    def out_shape(self, in_shape):
        return in_shape


class AvgPool:
    def __init__(self, window):
        if window < 1:
            raise ValueError("window must be positive")
        self.window = window

    def parameters(self):
        return []

    def apply(self, x):
        return avg_pool2d(x, self.window)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.window or w % self.window:
            raise ShapeError(f"pool window {self.window} does not divide {h}x{w}")
        return (c, h // self.window, w // self.window)


class Flatten:
    def parameters(self):
        return []

    def apply(self, x):
        return x.reshape(x.data.shape[0], -1)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


ACTIVATIONS = (ReLU, LeakyReLU)


class LayerStack:
    """Ordered layer list; composition of shapes is validated up front."""

    def __init__(self, layers, input_shape):
        if not layers:
            raise ShapeError("need at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        self.layer_shapes = shapes  # input shape followed by each output shape

    @property
    def output_dim(self):
        return self.layer_shapes[-1][0]

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def __call__(self, x):
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def astype(self, dtype):
        """Copy with all parameters cast to dtype (graph-independent)."""
        layers = []
        for layer in self.layers:
            if isinstance(layer, FullyConnected):
                layers.append(FullyConnected(layer.W.data.astype(dtype), layer.b.data.astype(dtype)))
            elif isinstance(layer, Conv2d):
                layers.append(Conv2d(layer.kernel.data.astype(dtype), layer.bias.data.astype(dtype),
                                     layer.stride, layer.padding))
            elif isinstance(layer, LeakyReLU):
                layers.append(LeakyReLU(layer.slope))
            elif isinstance(layer, AvgPool):
                layers.append(AvgPool(layer.window))
            elif isinstance(layer, ReLU):
                layers.append(ReLU())
            elif isinstance(layer, Flatten):
                layers.append(Flatten())
            else:
                raise TypeError(f"unknown layer {type(layer)}")
        return type(self)(layers, self.input_shape)


class Network(LayerStack):
    """Classifier stack; the final layer must be the FullyConnected logit
    layer (no activation after it)."""

    def __init__(self, layers, input_shape):
        if not layers or not isinstance(layers[-1], FullyConnected):
            raise ShapeError("final layer must be FullyConnected")
        super().__init__(layers, input_shape)


class NegExpHead:
    """Scalar output layer with weights W = -exp(h), strictly negative.

    Optimizing h instead of W keeps the negativity exact after any number
    of gradient steps; only h and the scalar bias are stored or saved.
    """

    def __init__(self, h, bias):
        self.h = as_tensor(h)
        self.bias = as_tensor(bias)
        if self.h.data.ndim != 1:
            raise ShapeError("head parameter h must be 1-D")
        if self.bias.data.shape != (1,):
            raise ShapeError("head bias must have shape (1,)")

    def parameters(self):
        return [self.h, self.bias]

    def weights(self):
        """Materialized output weights, always < 0; tracked in the graph."""
        return -self.h.exp()

    def apply(self, x):
        return (x * self.weights()).sum(axis=1) + self.bias

    def in_dim(self):
        return self.h.data.shape[0]

    def astype(self, dtype):
        return NegExpHead(self.h.data.astype(dtype), self.bias.data.astype(dtype))


class Discriminator:
    """Binary in/out logit network: trunk stack plus NegExpHead."""

    def __init__(self, trunk, head):
        if trunk.output_dim != head.in_dim():
            raise ShapeError(
                f"trunk emits {trunk.output_dim} features, head expects {head.in_dim()}"
            )
        self.trunk = trunk
        self.head = head

    @property
    def input_shape(self):
        return self.trunk.input_shape

    def parameters(self):
        return self.trunk.parameters() + self.head.parameters()

    def logit(self, x):
        """g(x) for a batched input; returns a (N,) graph node."""
        return self.head.apply(self.trunk(x))

    def logit_values(self, x):
        """Plain array of logits; no gradients kept."""
        return self.logit(as_tensor(x)).data

    def astype(self, dtype):
        return Discriminator(self.trunk.astype(dtype), self.head.astype(dtype))


# ---- spec-level operations ---------------------------------------------------


def forward(net, x):
    """All intermediate activations plus logits for a batched input.

    Returns a list of graph nodes, one per layer boundary, starting with
    the input itself.
    """
    x = as_tensor(x)
    if x.data.ndim == len(net.input_shape):
        x = as_tensor(x.data.reshape((1,) + net.input_shape))
    if tuple(x.data.shape[1:]) != net.input_shape:
        raise ShapeError(f"input shape {x.data.shape[1:]} != network input {net.input_shape}")
    acts = [x]
    for layer in net.layers:
        acts.append(layer.apply(acts[-1]))
    return acts


def backward(net, activations, logit_grad):
    """Parameter gradients given activations from ``forward`` on the same net.

    Seeds the logits with ``logit_grad`` and returns one gradient array per
    entry of ``net.parameters()``.
    """
    if len(activations) != len(net.layers) + 1:
        raise ValueError(
            f"expected {len(net.layers) + 1} activations, got {len(activations)}"
        )
    logit_grad = np.asarray(logit_grad)
    if logit_grad.shape != activations[-1].data.shape:
        raise ValueError("logit gradient shape does not match logits")
    for p in net.parameters():
        p.zero_grad()
    activations[-1].backward(logit_grad)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in net.parameters()]


def softmax_conf(logits):
    """Class probabilities and confidence (max probability).

    Accepts a length-K vector or an (N, K) batch; uses max subtraction so
    extreme logits cannot overflow.
    """
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError("logits must have K >= 2 classes")
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    conf = probs.max(axis=1)
    if squeeze:
        return probs[0], float(conf[0])
    return probs, conf


def sigmoid(t):
    """Logistic function on floats or arrays; saturates without overflow."""
    arr = np.asarray(t, dtype=np.float64)
    out = _sigmoid_stable(arr)
    if np.isscalar(t) or arr.ndim == 0:
        return float(out)
    return out


def cross_entropy_uniform_mix(logits, p_in, labels=None):
    """-log of softmax(logits)*p_in + (1/K)*(1-p_in), floored at 1e-12.

    With ``labels`` the loss picks the labelled class per row; without, it
    averages the log over all classes (the uniform-enforcement term).
    ``p_in`` is a constant (N,) array, not part of the graph.
    """
    n, k = logits.data.shape
    probs = log_softmax(logits, axis=1).exp()
    p = Tensor(np.asarray(p_in, dtype=logits.dtype).reshape(n, 1))
    mix = probs * p + Tensor(np.full((n, 1), 1.0 / k, dtype=logits.dtype)) * (1.0 - p)
    logmix = mix.clip_min(1e-12).log()
    if labels is None:
        return -logmix.mean(axis=1).mean()
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(labels)] = 1.0
    return -(logmix * Tensor(onehot)).sum(axis=1).mean()


def weight_decay_mask(model):
    """Decay flags aligned with ``model.parameters()``: weight matrices and
    conv kernels decay, biases do not, and the negative-weight head is
    excluded entirely."""
    if isinstance(model, Discriminator):
        return weight_decay_mask(model.trunk) + [False, False]
    mask = []
    for layer in model.layers:
        if isinstance(layer, (FullyConnected, Conv2d)):
            mask.extend([True, False])
    return mask


# ---- initialization and presets ----------------------------------------------


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def make_fc(rng, in_dim, out_dim, dtype=np.float32):
    return FullyConnected(he_normal(rng, (out_dim, in_dim), in_dim, dtype),
                          np.zeros(out_dim, dtype=dtype))


def make_conv(rng, in_ch, out_ch, k=3, stride=1, padding=1, dtype=np.float32):
    fan_in = in_ch * k * k
    return Conv2d(he_normal(rng, (out_ch, in_ch, k, k), fan_in, dtype),
                  np.zeros(out_ch, dtype=dtype), stride, padding)


def make_head(width, bias_init, dtype=np.float32):
    # h = -log(fan_in) puts every materialized weight at -1/fan_in
    h = np.full(width, -np.log(width), dtype=dtype)
    return NegExpHead(h, np.array([bias_init], dtype=dtype))


def build_classifier(rng, input_shape, num_classes, preset="desk"):
    """Small conv classifier; logits layer last."""
    c, h, w = input_shape
    if preset == "desk":
        layers = [
            make_conv(rng, c, 16), ReLU(), AvgPool(2),
            make_conv(rng, 16, 32), ReLU(), AvgPool(2),
            Flatten(),
            make_fc(rng, 32 * (h // 4) * (w // 4), 64), ReLU(),
            make_fc(rng, 64, num_classes),
        ]
    elif preset == "tiny":
        layers = [
            Flatten(),
            make_fc(rng, c * h * w, 32), ReLU(),
            make_fc(rng, 32, num_classes),
        ]
    else:
        raise ValueError(f"unknown classifier preset {preset!r}")
    return Network(layers, input_shape)


def build_discriminator(rng, input_shape, bias_init=3.0, preset="desk"):
    """Discriminator presets; "cifar" mirrors the published 5-layer CNN
    (conv 128 / conv 256 stride 2 / conv 256 / pool / fc 128 / fc 1)."""
    c, h, w = input_shape
    # every trunk ends with a ReLU: nonnegative pre-logit features are what
    # makes the negative-weight head push the logit down at large scale
    if preset == "desk":
        layers = [
            make_conv(rng, c, 16), ReLU(),
            make_conv(rng, 16, 32, stride=2), ReLU(),
            make_conv(rng, 32, 32), ReLU(),
            AvgPool(2), Flatten(),
            make_fc(rng, 32 * (h // 4) * (w // 4), 64), ReLU(),
        ]
        trunk_width = 64
    elif preset == "cifar":
        layers = [
            make_conv(rng, c, 128), ReLU(),
            make_conv(rng, 128, 256, stride=2), ReLU(),
            make_conv(rng, 256, 256), ReLU(),
            AvgPool(2), Flatten(),
            make_fc(rng, 256 * (h // 4) * (w // 4), 128), ReLU(),
        ]
        trunk_width = 128
    elif preset == "tiny":
        layers = [
            Flatten(),
            make_fc(rng, c * h * w, 16), ReLU(),
        ]
        trunk_width = 16
    else:
        raise ValueError(f"unknown discriminator preset {preset!r}")
    trunk = LayerStack(layers, input_shape)
    return Discriminator(trunk, make_head(trunk_width, bias_init))
