"""Joint predictive model: classifier mixed with the uniform distribution,
weighted by the certified in-distribution probability.

predict() realizes  p(y|x) = softmax(f(x)) * p_in + (1/K) * (1 - p_in)
with p_in = sigmoid(g(x) + delta).  Mixing with a common positive factor
preserves the classifier's ranking, so accuracy never changes.  The
certified confidence bound and the semi-joint training loss both rely only
on the discriminator's logit bound, never on bounds for the classifier.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import ibp, metrics, nn
from .autodiff import Tensor, as_tensor, log_softmax
from .optim import SgdMomentum
from .seeding import rng_stream


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class JointModel:
    classifier: nn.Network
    discriminator: nn.Discriminator
    delta: float
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.classifier.output_dim != self.num_classes:
            raise ValueError("classifier output dim does not match num_classes")
        if self.classifier.input_shape != self.discriminator.input_shape:
            raise ValueError("classifier and discriminator input shapes differ")


def combine_separate(classifier, discriminator, delta, num_classes=None):
    """Compose an independently trained classifier with a discriminator.

    The composition has exactly the classifier's accuracy (ranking is
    preserved), so certified detection can be bolted onto a deployed model.
    """
    k = classifier.output_dim
    if num_classes is not None and num_classes != k:
        raise ValueError(f"classifier has {k} outputs, expected {num_classes}")
    return JointModel(classifier, discriminator, float(delta), k)


def shift_bias(jm, delta, allow_negative=False):
    """Model with the discriminator bias offset set to ``delta``.

    Positive shifts raise p_in everywhere (equivalent to assuming a larger
    prior in-distribution probability); negative shifts are unusual and
    must be requested explicitly.
    """
    if delta < 0 and not allow_negative:
        raise ValueError("negative shift requires allow_negative=True")
    return replace(jm, delta=float(delta))


def predict(jm, x):
    """Class probabilities, in-distribution probability and confidence.

    Accepts a single input or a batch; the batch form returns arrays.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = arr.ndim == len(jm.classifier.input_shape)
    if single:
        arr = arr[None]
    f_logits = jm.classifier(as_tensor(arr)).data
    probs_f, _ = nn.softmax_conf(f_logits)
    g = jm.discriminator.logit_values(arr)
    p_in = nn.sigmoid(g.astype(np.float64) + jm.delta)
    probs = probs_f * p_in[:, None] + (1.0 - p_in[:, None]) / jm.num_classes
    conf = probs.max(axis=1)
    if single:
        return probs[0], float(p_in[0]), float(conf[0])
    return probs, p_in, conf


def conf_upper_bound(jm, z, tm):
    """Certified upper bound on the confidence over the threat ball:
    (K-1)/K * sigmoid(upper_logit + delta) + 1/K, evaluated in float64."""
    disc64 = jm.discriminator.astype(np.float64)
    arr = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    single = arr.ndim == len(jm.discriminator.input_shape)
    if single:
        arr = arr[None]
    ub = ibp.upper_logit_values(disc64, arr, tm)
    k = jm.num_classes
    bound = (k - 1.0) / k * nn.sigmoid(ub + jm.delta) + 1.0 / k
    return float(bound[0]) if single else bound


def confidence_objective(jm, dtype=np.float64):
    """Differentiable confidence function for the attack loop."""
    f = jm.classifier.astype(dtype)
    d = jm.discriminator.astype(dtype)
    k = jm.num_classes
    delta = jm.delta

    def fn(x, need_grad=True):
        xt = Tensor(np.asarray(x, dtype=dtype))
        probs_f = log_softmax(f(xt), axis=1).exp()
        p_in = (d.logit(xt) + delta).sigmoid().reshape(-1, 1)
        probs = probs_f * p_in + (1.0 - p_in) * (1.0 / k)
        conf = probs.vmax(axis=1)
        if not need_grad:
            return conf.data, None
        conf.sum().backward()
        return conf.data, xt.grad

    return fn


def accuracy(model, images, labels):
    """Fraction of argmax predictions matching labels; identical for a
    joint model and its bare classifier."""
    net = model.classifier if isinstance(model, JointModel) else model
    logits = net(as_tensor(np.asarray(images))).data
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ---- semi-joint training -----------------------------------------------------


@dataclass
class SemiJointConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    lr_drop_epochs: tuple = None  # defaults to 50/75/90% of epochs
    lr_drop_factor: float = 0.1
    batch_in: int = 128
    batch_out: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_drop_epochs is None:
            e = self.epochs
            self.lr_drop_epochs = (int(0.5 * e), int(0.75 * e), int(0.9 * e))
        self.lr_drop_epochs = tuple(self.lr_drop_epochs)


def semi_joint_loss(jm, x_in, y_in, x_out, p_in_override=None):
    """Cross-entropy of the joint predictive distribution (Eq. of the
    mixture) on labelled in-data plus the uniform-enforcement term on
    out-data.  Only the classifier receives gradients; p_in enters as a
    constant computed from the frozen discriminator.

    Returns (loss value, gradients for jm.classifier.parameters(), parts).
    """
    x_in = np.asarray(x_in)
    x_out = np.asarray(x_out)
    if p_in_override is None:
        g_in = jm.discriminator.logit_values(x_in).astype(np.float64)
        g_out = jm.discriminator.logit_values(x_out).astype(np.float64)
        p_in_in = nn.sigmoid(g_in + jm.delta)
        p_in_out = nn.sigmoid(g_out + jm.delta)
    else:
        p_in_in = np.full(x_in.shape[0], p_in_override)
        p_in_out = np.full(x_out.shape[0], p_in_override)

    for p in jm.classifier.parameters():
        p.zero_grad()
    in_term = nn.cross_entropy_uniform_mix(jm.classifier(as_tensor(x_in)), p_in_in, y_in)
    out_term = nn.cross_entropy_uniform_mix(jm.classifier(as_tensor(x_out)), p_in_out)
    loss = in_term + out_term
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad
             for p in jm.classifier.parameters()]
    parts = {"in_loss": float(in_term.data), "out_loss": float(out_term.data)}
    return float(loss.data), grads, parts


def train_semi_joint(jm, cfg, data_in, data_out, p_in_override=None):
    """SGD-with-momentum training of the classifier inside the joint model.

    The discriminator and the bias shift stay frozen throughout.  Setting
    ``p_in_override=1.0`` turns the loss into plain outlier exposure
    (cross-entropy plus uniform enforcement), which serves as the baseline
    for the shift sweep.  Returns per-epoch log rows.
    """
    images_in, labels_in = _images_labels(data_in)
    images_out = _images(data_out)
    if images_in.shape[0] == 0 or images_out.shape[0] == 0:
        raise ValueError("training data must be nonempty")
    if labels_in is None:
        raise ValueError("in-distribution training data needs labels")

    params = jm.classifier.parameters()
    opt = SgdMomentum(params, lr=cfg.lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay,
                      decay_mask=nn.weight_decay_mask(jm.classifier))
    rng = rng_stream(cfg.seed, "train")
    out_cycle = _cycler(images_out.shape[0], cfg.batch_out, rng)
    rows = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_drop_factor ** sum(epoch >= d for d in cfg.lr_drop_epochs)
        perm = rng.permutation(images_in.shape[0])
        steps = max(1, images_in.shape[0] // cfg.batch_in)
        tot = np.zeros(3)
        for s in range(steps):
            idx = perm[s * cfg.batch_in:(s + 1) * cfg.batch_in]
            odx = next(out_cycle)
            loss, grads, parts = semi_joint_loss(
                jm, images_in[idx], labels_in[idx], images_out[odx], p_in_override)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} step {s}")
            opt.step(grads)
            tot += (parts["in_loss"], parts["out_loss"], loss)
        rows.append({"epoch": epoch, "lr": opt.lr,
                     "in_loss": tot[0] / steps, "out_loss": tot[1] / steps,
                     "total": tot[2] / steps})
    return rows


def train_oe_classifier(classifier, cfg, data_in, data_out):
    """Outlier-exposure baseline: the same objective with p_in fixed to 1."""
    dummy_disc = _unit_disc(classifier.input_shape)
    jm = JointModel(classifier, dummy_disc, 0.0, classifier.output_dim)
    return train_semi_joint(jm, cfg, data_in, data_out, p_in_override=1.0)


def _unit_disc(input_shape):
    d = int(np.prod(input_shape))
    trunk = nn.LayerStack([nn.Flatten(), nn.FullyConnected(
        np.zeros((1, d), dtype=np.float32), np.zeros(1, dtype=np.float32)), nn.ReLU()],
        input_shape)
    return nn.Discriminator(trunk, nn.make_head(1, 0.0))


# ---- bias shift selection ------------------------------------------------------


@dataclass
class DeltaSweepResult:
    delta: float
    index: int
    rows: list


def delta_sweep_select(deltas, models, oe_baseline_auc, in_images, out_images, tm,
                       in_labels=None):
    """Pick the shift with the best certified AUC among those that still
    beat the outlier-exposure baseline on clean AUC; fall back to the best
    clean AUC if nothing qualifies.

    AUC and certified AUC are computed on a held-out slice of the training
    out-distribution against clean in-distribution confidences.
    """
    deltas = list(deltas)
    if not deltas or len(deltas) != len(models):
        raise ValueError("need one trained model per candidate delta")
    rows = []
    for delta, jm in zip(deltas, models):
        _, _, conf_in = predict(jm, in_images)
        _, _, conf_out = predict(jm, out_images)
        conf_ub = conf_upper_bound(jm, out_images, tm)
        row = {"delta": float(delta),
               "auc": metrics.auc(conf_in, conf_out),
               "gauc": metrics.gauc(conf_in, conf_ub)}
        if in_labels is not None:
            row["acc"] = accuracy(jm, in_images, in_labels)
        rows.append(row)
    best = select_by_rule([r["auc"] for r in rows], [r["gauc"] for r in rows],
                          oe_baseline_auc)
    for i, r in enumerate(rows):
        r["selected"] = i == best
    return DeltaSweepResult(delta=rows[best]["delta"], index=best, rows=rows)


def select_by_rule(aucs, gaucs, oe_baseline_auc):
    """Index of the best candidate: maximal certified AUC among candidates
    whose clean AUC beats the baseline; maximal clean AUC as fallback."""
    if not aucs or len(aucs) != len(gaucs):
        raise ValueError("need matching nonempty auc/gauc lists")
    qualifying = [i for i, a in enumerate(aucs) if a > oe_baseline_auc]
    if qualifying:
        return max(qualifying, key=lambda i: gaucs[i])
    return max(range(len(aucs)), key=lambda i: aucs[i])


# ---- shared data plumbing ------------------------------------------------------


def _images(data):
    return data.images if hasattr(data, "images") else np.asarray(data)


def _images_labels(data):
    if hasattr(data, "images"):
        return data.images, data.labels
    images, labels = data
    return np.asarray(images), (None if labels is None else np.asarray(labels))


def _cycler(n, batch, rng):
    """Endless stream of index batches, reshuffling after each pass."""
    def gen():
        while True:
            perm = rng.permutation(n)
            for s in range(max(1, n // batch)):
                yield perm[s * batch:(s + 1) * batch]
    return gen()
