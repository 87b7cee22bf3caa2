"""Asymptotic behaviour of the joint model along rays.

Far enough out along any ray, a ReLU network settles into one linear
region; there the discriminator's pre-logit output is an affine map
U x + d with nonnegative values.  If Ux has a positive component, the
strictly negative head weights drive the logit to minus infinity with the
scale, so the predictive distribution collapses to uniform.  This module
extracts the region reached by a ray, tests the premise, checks the decay
empirically and searches for worst-case directions.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Tensor
from .joint import JointModel, predict
from .seeding import rng_stream


class RegionNotReachedError(RuntimeError):
    """Activation pattern still changing at the scale cap; retry larger."""


@dataclass
class LinearRegion:
    U: np.ndarray              # (width, d): pre-logit affine matrix on the region
    d: np.ndarray              # (width,): affine offset
    beta_star: float           # scale at which the pattern stabilized
    pattern: list              # one boolean mask per activation layer
    input_shape: tuple


def activation_pattern(stack, x):
    """Sign pattern of every activation layer's pre-activation at x.

    Units sitting exactly at zero count as inactive, giving the boundary
    case a deterministic rule.
    """
    masks = []
    cur = Tensor(np.asarray(x, dtype=np.float64))
    for layer in stack.layers:
        if isinstance(layer, (nn.ReLU, nn.LeakyReLU)):
            masks.append(cur.data[0] > 0)
        cur = layer.apply(cur)
    return masks, cur.data[0]


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def extract_region(disc, x, beta):
    """Affine form of the discriminator's pre-logit map on the region
    containing beta*x.

    The activation pattern must agree at {beta, 2 beta, 10 beta}; the
    composed affine map is verified against the network at those scales
    (relative tolerance 1e-5) before returning.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x != 0):
        raise ValueError("direction must be nonzero")
    if beta <= 0:
        raise ValueError("beta must be positive")
    trunk = disc.trunk.astype(np.float64)
    shape = trunk.input_shape
    probe = x.reshape((1,) + shape)

    patterns = []
    outputs = []
    for scale in (beta, 2 * beta, 10 * beta):
        masks, out = activation_pattern(trunk, probe * scale)
        patterns.append(masks)
        outputs.append(out)
    if not (_same_pattern(patterns[0], patterns[1]) and _same_pattern(patterns[0], patterns[2])):
        raise RegionNotReachedError(
            f"activation pattern not stable across scales {beta:g}..{10 * beta:g}")

    U, d = _compose_affine(trunk, patterns[0])
    flat = x.reshape(-1)
    for scale, out in zip((beta, 2 * beta, 10 * beta), outputs):
        recon = U @ (scale * flat) + d
        err = np.max(np.abs(recon - out))
        if err > 1e-5 * max(1.0, float(np.max(np.abs(out)))):
            raise RegionNotReachedError(
                f"affine reconstruction off by {err:g} at scale {scale:g}")
    return LinearRegion(U, d, float(beta), patterns[0], shape)


def _compose_affine(trunk, pattern):
    """Fold the layer stack into (U, d) with the activation pattern frozen.

    Linear layers are applied to the basis columns directly (their matrix
    action is layer(v) - layer(0)), so convolution and pooling never need
    a dedicated matrix form.
    """
    shape = trunk.input_shape
    dim = int(np.prod(shape))
    A = np.eye(dim)
    c = np.zeros(dim)
    p_idx = 0
    for layer, in_shape in zip(trunk.layers, trunk.layer_shapes):
        if isinstance(layer, (nn.ReLU, nn.LeakyReLU)):
            mask = pattern[p_idx].reshape(-1)
            p_idx += 1
            factor = mask.astype(np.float64)
            if isinstance(layer, nn.LeakyReLU):
                factor = np.where(mask, 1.0, layer.slope)
            A = factor[:, None] * A
            c = factor * c
        else:
            batch = np.concatenate([A.T, c[None, :], np.zeros((1, A.shape[0]))])
            out = layer.apply(Tensor(batch.reshape((-1,) + tuple(in_shape)))).data
            out = out.reshape(out.shape[0], -1)
            t = out[-1]
            A = (out[:dim] - t).T
            c = out[dim]  # layer(c) = M c + t, offset included
    return A, c


def find_stable_region(disc, x, beta0=1e4, beta_max=1e12):
    """Double the probe scale until the pattern stabilizes."""
    beta = beta0
    while beta <= beta_max:
        try:
            return extract_region(disc, x, beta)
        except RegionNotReachedError:
            beta *= 2
    raise RegionNotReachedError(f"no stable region below scale {beta_max:g}")


@dataclass
class Theorem1Report:
    ux_nonzero: bool
    inner_product: float
    limit_ok: bool
    beta_star: float = 0.0
    p_in_at_probe: float = 1.0
    conf_gap_at_probe: float = 1.0
    slope_negative: bool = False


def check_theorem1(jm, x, beta_probe=1e6, ux_tol=1e-8):
    """Machine check of the uniform-confidence limit along the ray beta*x.

    Extracts the asymptotic region of the discriminator, tests the premise
    Ux != 0, confirms the logit slope along the ray is negative (forced by
    the strictly negative head weights acting on nonnegative Ux) and
    evaluates the joint confidence at a large probe scale.
    """
    x = np.asarray(x, dtype=np.float64)
    region = find_stable_region(jm.discriminator, x)
    ux = region.U @ x.reshape(-1)
    ux_nonzero = bool(np.any(ux > ux_tol))
    w = -np.exp(jm.discriminator.head.h.data.astype(np.float64))
    inner = float(w @ ux)

    report = Theorem1Report(ux_nonzero=ux_nonzero, inner_product=inner,
                            limit_ok=False, beta_star=region.beta_star)
    if not ux_nonzero:
        return report

    report.slope_negative = inner < 0
    jm64 = _as_float64(jm)
    probe = (beta_probe * x).reshape((1,) + jm.discriminator.input_shape)
    probs, p_in, conf = predict(jm64, probe)
    report.p_in_at_probe = float(p_in[0])
    report.conf_gap_at_probe = float(conf[0] - 1.0 / jm.num_classes)
    report.limit_ok = report.slope_negative and report.conf_gap_at_probe < 1e-3
    return report


def _as_float64(jm):
    return JointModel(jm.classifier.astype(np.float64),
                      jm.discriminator.astype(np.float64),
                      jm.delta, jm.num_classes)


# ---- worst-case direction search ------------------------------------------------


@dataclass
class DirectionSearchConfig:
    n_directions: int = 10
    # (sphere radius, steps, step size) phases, run in order
    phases: tuple = ((100.0, 10000, 0.1), (100.0, 10000, 0.01), (1000.0, 20000, 0.1))
    alphas: tuple = tuple(float(a) for a in np.logspace(0, 7, 29))
    seed: int = 0
    projection_tol: float = 1e-6


@dataclass
class DirectionSearchResult:
    directions: np.ndarray     # (n, *input_shape), each scaled to unit sup-norm
    curve: list                # rows {alpha, max_p_in}
    per_direction: list        # rows {direction, alpha, p_in, conf}


def adversarial_direction_search(jm, cfg=None):
    """Gradient ascent on the shifted discriminator logit over spheres of
    growing radius, then confidence decay curves along the found rays.

    All directions evolve in one batch.  Each step projects back onto the
    current sphere; final directions are rescaled to sup-norm 1.
    """
    cfg = cfg or DirectionSearchConfig()
    disc = jm.discriminator.astype(np.float64)
    shape = disc.input_shape
    dim = int(np.prod(shape))
    rng = rng_stream(cfg.seed, "probe")
    x = rng.uniform(-0.5, 0.5, size=(cfg.n_directions, dim))

    def project(v, radius):
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        return radius * v / np.maximum(norms, 1e-30)

    for radius, steps, step_size in cfg.phases:
        x = project(x, radius)
        for _ in range(steps):
            xt = Tensor(x.reshape((-1,) + shape))
            out = disc.logit(xt)
            out.sum().backward()
            x = project(x + step_size * xt.grad.reshape(cfg.n_directions, dim), radius)
            # structural: every iterate sits on the sphere
            radii = np.linalg.norm(x, axis=1)
            assert np.all(np.abs(radii - radius) <= cfg.projection_tol * radius)

    sup = np.abs(x).max(axis=1, keepdims=True)
    directions = (x / np.maximum(sup, 1e-30)).reshape((-1,) + shape)

    jm64 = _as_float64(jm)
    per_direction = []
    curve = []
    for alpha in cfg.alphas:
        _, p_in, conf = predict(jm64, directions * alpha)
        for i in range(cfg.n_directions):
            per_direction.append({"direction": i, "alpha": alpha,
                                  "p_in": float(p_in[i]), "conf": float(conf[i])})
        curve.append({"alpha": alpha, "max_p_in": float(p_in.max())})
    return DirectionSearchResult(directions, curve, per_direction)


# ---- confidence along rays --------------------------------------------------------


def ray_confidence(model, directions, alphas, center=0.5):
    """Confidence (and in-probability for joint models) at center + alpha*n.

    Returns (per-point rows, per-alpha aggregate rows).
    """
    directions = np.asarray(directions, dtype=np.float64)
    if directions.ndim == 1:
        directions = directions[None]
    if not np.all(np.any(directions.reshape(directions.shape[0], -1) != 0, axis=1)):
        raise ValueError("directions must be nonzero")
    is_joint = isinstance(model, JointModel)
    mdl = _as_float64(model) if is_joint else model.astype(np.float64)
    rows = []
    aggregate = []
    for alpha in alphas:
        pts = center + float(alpha) * directions
        if is_joint:
            _, p_in, conf = predict(mdl, pts)
        else:
            logits = mdl(Tensor(pts)).data
            _, conf = nn.softmax_conf(logits)
            p_in = np.full(conf.shape, np.nan)
        for i in range(directions.shape[0]):
            rows.append({"direction": i, "alpha": float(alpha),
                         "p_in": float(p_in[i]), "conf": float(conf[i])})
        aggregate.append({"alpha": float(alpha),
                          "mean_conf": float(conf.mean()), "max_conf": float(conf.max()),
                          "mean_p_in": float(np.mean(p_in)), "max_p_in": float(np.max(p_in))})
    return rows, aggregate


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in columns])
    return buf.getvalue()
