"""Certifiably robust training of the binary in/out discriminator.

The loss is plain logistic loss on in-distribution samples plus logistic
loss on the *upper bound* of the logit over the threat ball around each
out-distribution sample.  Robustness radius and the weight of the out-term
both ramp up linearly from zero over the first part of training; the
learning rate drops stepwise.  Weight decay never touches the output head,
whose bias starts positive so the strictly negative weights do not pin the
logit low from the start.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import ibp, nn
from .autodiff import as_tensor
from .joint import TrainingDivergedError, _cycler, _images
from .optim import Adam
from .seeding import rng_stream


@dataclass
class DiscTrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    lr_drop_epochs: tuple = None  # defaults to 50/75/85% of epochs
    lr_drop_factor: float = 0.2
    batch_in: int = 128
    batch_out: int = 128
    epsilon_final: float = 0.01
    kappa_final: float = 1.0
    ramp_epochs: int = None  # defaults to 30% of epochs
    weight_decay: float = 5e-4
    bias_init: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_drop_epochs is None:
            e = self.epochs
            self.lr_drop_epochs = (int(0.5 * e), int(0.75 * e), int(0.85 * e))
        self.lr_drop_epochs = tuple(self.lr_drop_epochs)
        if self.ramp_epochs is None:
            self.ramp_epochs = int(0.3 * self.epochs)
        if self.ramp_epochs > self.epochs:
            raise ValueError("ramp_epochs must not exceed epochs")
        if self.epsilon_final < 0:
            raise ValueError("epsilon_final must be nonnegative")


def ramp(epoch, cfg):
    """Linear rise of (epsilon_t, kappa_t) from zero to the final values
    over the first ``ramp_epochs`` epochs, constant afterwards."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    frac = 1.0 if cfg.ramp_epochs == 0 else min(1.0, epoch / cfg.ramp_epochs)
    return cfg.epsilon_final * frac, cfg.kappa_final * frac


def binary_robust_loss(disc, x_in, x_out, eps_t, kappa_t):
    """Mean softplus(-g(x)) over in-samples plus kappa times the mean
    softplus of the certified logit upper bound over out-samples.

    Gradients flow through the bound recursion (the weight sign split is
    differentiable almost everywhere).  Returns (loss, grads, parts).
    """
    if eps_t < 0 or not 0.0 <= kappa_t <= 1.0:
        raise ValueError("need eps_t >= 0 and kappa_t in [0, 1]")
    for p in disc.parameters():
        p.zero_grad()
    g_in = disc.logit(as_tensor(np.asarray(x_in)))
    in_loss = (-g_in).softplus().mean()
    if kappa_t > 0.0:
        bound = ibp.upper_logit(disc, np.asarray(x_out), ibp.ThreatModel(eps_t))
        out_loss = bound.softplus().mean()
        total = in_loss + kappa_t * out_loss
        out_val = float(out_loss.data)
    else:
        total = in_loss
        out_val = 0.0
    total.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad
             for p in disc.parameters()]
    parts = {"in_loss": float(in_loss.data), "out_loss": out_val}
    return float(total.data), grads, parts


def train_discriminator(cfg, data_in, data_out, disc=None, preset="desk"):
    """Adam training under the ramp schedule; deterministic per seed.

    Builds the discriminator from ``preset`` when none is passed (bias
    initialized from the config).  Returns (disc, per-epoch log rows).
    """
    images_in = _images(data_in)
    images_out = _images(data_out)
    if images_in.shape[0] == 0 or images_out.shape[0] == 0:
        raise ValueError("training data must be nonempty")
    if disc is None:
        rng = rng_stream(cfg.seed, "init")
        disc = nn.build_discriminator(rng, tuple(images_in.shape[1:]),
                                      bias_init=cfg.bias_init, preset=preset)

    opt = Adam(disc.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
               decay_mask=nn.weight_decay_mask(disc))
    rng = rng_stream(cfg.seed, "train")
    out_cycle = _cycler(images_out.shape[0], cfg.batch_out, rng)
    rows = []
    for epoch in range(cfg.epochs):
        eps_t, kappa_t = ramp(epoch, cfg)
        opt.lr = cfg.lr * cfg.lr_drop_factor ** sum(epoch >= d for d in cfg.lr_drop_epochs)
        perm = rng.permutation(images_in.shape[0])
        steps = max(1, images_in.shape[0] // cfg.batch_in)
        tot = np.zeros(3)
        for s in range(steps):
            idx = perm[s * cfg.batch_in:(s + 1) * cfg.batch_in]
            odx = next(out_cycle)
            loss, grads, parts = binary_robust_loss(
                disc, images_in[idx], images_out[odx], eps_t, kappa_t)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} step {s}")
            opt.step(grads)
            tot += (parts["in_loss"], parts["out_loss"], loss)
        rows.append({"epoch": epoch, "eps_t": eps_t, "kappa_t": kappa_t,
                     "in_loss": tot[0] / steps, "out_loss": tot[1] / steps,
                     "total": tot[2] / steps})
    return disc, rows


LOG_COLUMNS = ("epoch", "eps_t", "kappa_t", "in_loss", "out_loss", "total")


def log_to_csv(rows, columns=LOG_COLUMNS):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in columns])
    return buf.getvalue()
