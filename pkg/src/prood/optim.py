"""Adam and SGD-with-momentum parameter updates.

Weight decay is decoupled from the gradient (applied as a direct shrink of
the parameter) and honours a per-parameter exclusion mask so the
discriminator's output head is never decayed.
"""

import numpy as np


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = _resolve_mask(decay_mask, self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        _check_grads(self.params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay_mask):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
            if decay and self.weight_decay:
                p.data -= np.asarray(self.lr * self.weight_decay * p.data, dtype=p.data.dtype)


class SgdMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = _resolve_mask(decay_mask, self.params)
        self.buffer = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        _check_grads(self.params, grads)
        self.t += 1
        for p, g, buf, decay in zip(self.params, grads, self.buffer, self.decay_mask):
            buf *= self.momentum
            buf += g
            p.data -= (self.lr * buf).astype(p.data.dtype, copy=False)
            if decay and self.weight_decay:
                p.data -= np.asarray(self.lr * self.weight_decay * p.data, dtype=p.data.dtype)


def _resolve_mask(mask, params):
    if mask is None:
        return [True] * len(params)
    mask = list(mask)
    if len(mask) != len(params):
        raise ValueError("decay mask length must match parameter count")
    return mask


def _check_grads(params, grads):
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
