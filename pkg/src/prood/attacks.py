"""Confidence-maximizing PGD over the l-infinity ball around OOD samples.

The attack runs momentum PGD with a backtracking step size from an ensemble
of start points: the unperturbed sample, its decontrasted version, uniform
draws from the ball and Gaussian-perturbed copies.  The best confidence
seen anywhere is returned, so the result can never fall below the clean
confidence and upper-bounds what a worst-case adversary achieves only from
below.
"""

from dataclasses import dataclass

import numpy as np

from .seeding import rng_stream


@dataclass
class AttackConfig:
    steps: int = 200
    momentum: float = 0.9
    step_init: float = 0.1
    backtrack_factor: float = 0.5
    growth_factor: float = 1.1
    n_uniform_starts: int = 3
    n_gauss_starts: int = 3
    gauss_sigma: float = 1e-4
    extra_restarts: int = 5
    step_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("step_init", "backtrack_factor", "growth_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def decontrast_start(z, tm):
    """Closest point to the all-grey image within the threat ball.

    Elementwise this is 0.5 clamped into [z-eps, z+eps] and the pixel box,
    which minimizes the l-infinity distance to grey over the feasible set.
    """
    z = np.asarray(z, dtype=np.float64)
    lo = np.maximum(z - tm.epsilon, tm.domain_low)
    hi = np.minimum(z + tm.epsilon, tm.domain_high)
    return np.clip(0.5, lo, hi)


def pgd_max_conf(objective, z, tm, cfg, keep_trace=False):
    """Maximize a confidence function over B_inf(z, eps) intersected [0,1].

    ``objective`` is either a callable ``fn(x_batch, need_grad) ->
    (conf, grad)`` or a joint model (wrapped automatically).  Returns the
    best point found and its confidence; with ``keep_trace`` also the
    running best per step, which is nondecreasing by construction.
    """
    fn = _as_objective(objective)
    z = np.asarray(z, dtype=np.float64)
    best_x, best_c, trace = attack_batch(fn, z[None], tm, cfg, keep_trace=True)
    if keep_trace:
        return best_x[0], float(best_c[0]), [t[:, 0] for t in trace]
    return best_x[0], float(best_c[0])


def attack_batch(fn, z, tm, cfg, keep_trace=False):
    """Run the full restart ensemble on a batch of samples at once.

    Per-sample step sizes and acceptances evolve independently, so this is
    equivalent to attacking each sample on its own.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    lo = np.maximum(z - tm.epsilon, tm.domain_low)
    hi = np.minimum(z + tm.epsilon, tm.domain_high)
    rng = rng_stream(cfg.seed, "attack")

    best_x = z.copy()
    best_c = fn(z, False)[0].copy()
    traces = []

    for x0 in _start_points(z, lo, hi, tm, cfg, rng):
        x = x0.copy()
        alpha = np.full(n, cfg.step_init)
        m = np.zeros_like(z)
        c_cur = fn(x, False)[0].copy()
        _fold_best(best_x, best_c, x, c_cur)
        trace = [best_c.copy()] if keep_trace else None

        for _ in range(cfg.steps):
            if np.all(alpha < cfg.step_floor):
                break
            _, g = fn(x, True)
            flat = g.reshape(n, -1)
            gnorm = np.abs(flat).sum(axis=1)
            scale = np.where(gnorm > 0, 1.0 / np.maximum(gnorm, 1e-30), 0.0)
            m = cfg.momentum * m + flat.reshape(g.shape) * scale.reshape((n,) + (1,) * (z.ndim - 1))
            step = alpha.reshape((n,) + (1,) * (z.ndim - 1)) * np.sign(m)
            cand = np.clip(x + step, lo, hi)
            c_new = fn(cand, False)[0]
            improved = c_new > c_cur
            sel = improved.reshape((n,) + (1,) * (z.ndim - 1))
            x = np.where(sel, cand, x)
            c_cur = np.where(improved, c_new, c_cur)
            alpha = np.where(improved, alpha * cfg.growth_factor, alpha * cfg.backtrack_factor)
            _fold_best(best_x, best_c, cand, c_new)
            if keep_trace:
                trace.append(best_c.copy())
        if keep_trace:
            traces.append(np.stack(trace))

    # feasibility is structural; a violation here means a projection bug
    assert np.all(np.abs(best_x - z) <= tm.epsilon + 1e-9)
    assert np.all(best_x >= tm.domain_low) and np.all(best_x <= tm.domain_high)
    if keep_trace:
        return best_x, best_c, traces
    return best_x, best_c


def _start_points(z, lo, hi, tm, cfg, rng):
    yield z
    yield decontrast_start(z, tm)
    for _ in range(cfg.n_uniform_starts + cfg.extra_restarts):
        yield lo + rng.random(z.shape) * (hi - lo)
    for _ in range(cfg.n_gauss_starts):
        yield np.clip(z + cfg.gauss_sigma * rng.standard_normal(z.shape), lo, hi)


def _fold_best(best_x, best_c, x, c):
    better = c > best_c
    if np.any(better):
        best_x[better] = x[better]
        best_c[better] = c[better]


def _as_objective(objective):
    if callable(objective):
        return objective
    from .joint import confidence_objective  # deferred: joint builds on attacks' caller side
    return confidence_objective(objective)
