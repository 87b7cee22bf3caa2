"""Interval bound propagation: sound elementwise output ranges over an
l-infinity input ball intersected with the pixel box [0,1]^d.

Linear layers split their weights into positive and negative parts so the
upper bound combines the upper input bound through positive weights and the
lower input bound through negative ones (and vice versa).  Monotone layers
(ReLU, leaky ReLU, average pooling) act on both bounds directly.  The whole
recursion is built from graph ops, so robust losses can differentiate
through the bounds.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d
from . import nn


class DomainError(ValueError):
    """Input lies outside the model's pixel domain."""


@dataclass
class ThreatModel:
    """l-infinity ball of radius epsilon, intersected with [0,1]^d."""
    epsilon: float
    domain_low: float = 0.0
    domain_high: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class IntervalTensor:
    lower: Tensor
    upper: Tensor

    def check(self, tol=0.0):
        if np.any(self.lower.data > self.upper.data + tol):
            raise ValueError("interval invariant violated: lower > upper")
        return self


def input_interval(z, tm):
    """Interval for the input layer: [max(z-eps, 0), min(z+eps, 1)]."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if np.any(z < tm.domain_low) or np.any(z > tm.domain_high):
        raise DomainError("input must lie within the pixel domain [0,1]")
    lower = np.maximum(z - tm.epsilon, tm.domain_low).astype(z.dtype, copy=False)
    upper = np.minimum(z + tm.epsilon, tm.domain_high).astype(z.dtype, copy=False)
    return IntervalTensor(Tensor(lower), Tensor(upper))


def propagate_layer(iv, layer):
    """One step of the bound recursion for a single layer."""
    lb, ub = iv.lower, iv.upper
    if isinstance(layer, nn.FullyConnected):
        wp = layer.W.pos_part()
        wn = layer.W.neg_part()
        new_ub = ub @ wp.T + lb @ wn.T + layer.b
        new_lb = lb @ wp.T + ub @ wn.T + layer.b
    elif isinstance(layer, nn.Conv2d):
        kp = layer.kernel.pos_part()
        kn = layer.kernel.neg_part()
        new_ub = conv2d(ub, kp, layer.bias, layer.stride, layer.padding) \
            + conv2d(lb, kn, None, layer.stride, layer.padding)
        new_lb = conv2d(lb, kp, layer.bias, layer.stride, layer.padding) \
            + conv2d(ub, kn, None, layer.stride, layer.padding)
    elif isinstance(layer, nn.ReLU):
        new_lb, new_ub = lb.relu(), ub.relu()
    elif isinstance(layer, nn.LeakyReLU):
        new_lb, new_ub = lb.leaky_relu(layer.slope), ub.leaky_relu(layer.slope)
    elif isinstance(layer, nn.AvgPool):
        # pooling coefficients are nonnegative, so bounds map through directly
        new_lb, new_ub = layer.apply(lb), layer.apply(ub)
    elif isinstance(layer, nn.Flatten):
        new_lb, new_ub = layer.apply(lb), layer.apply(ub)
    else:
        raise TypeError(f"no interval rule for layer {type(layer)}")
    return IntervalTensor(new_lb, new_ub)


def propagate(iv, layers):
    """Bound intervals after every layer, in order."""
    out = []
    for layer in layers:
        iv = propagate_layer(iv, layer)
        out.append(iv)
    return out


def upper_logit(disc, z, tm):
    """Sound upper bound on the discriminator logit over the threat ball.

    Returns a (N,) graph node so training can push the bound down.  The
    head weights are strictly negative, so its contribution pairs the
    positive part (identically zero) with the upper pre-logit bound and the
    negative part with the lower one.
    """
    z = as_tensor(z)
    data = z.data
    if data.ndim == len(disc.input_shape):
        data = data.reshape((1,) + disc.input_shape)
    iv = input_interval(data, tm)
    for layer in disc.trunk.layers:
        iv = propagate_layer(iv, layer)
    w = disc.head.weights()
    wp = w.pos_part()
    wn = w.neg_part()
    return (iv.upper * wp).sum(axis=1) + (iv.lower * wn).sum(axis=1) + disc.head.bias


def upper_logit_values(disc, z, tm):
    """Upper logit bound as a plain (N,) array (no graph kept)."""
    return upper_logit(disc, z, tm).data
