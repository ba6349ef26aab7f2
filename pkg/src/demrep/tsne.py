"""Exact (dense O(n^2)) t-SNE for projecting learned embeddings to 2-D.

Gaussian bandwidths are calibrated per point by binary search so the
perplexity (2^entropy) of each conditional distribution hits the target.
The layout is optimized by momentum gradient descent on the KL divergence
between the symmetrized input affinities and Student-t output affinities,
with early exaggeration for the first iterations. The returned KL trace is
always measured against the true (unexaggerated) affinities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

_P_FLOOR = 1e-12


@dataclass
class TsneConfig:
    out_dims: int = 2
    perplexity: float = 5.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    step_size: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    init_scale: float = 1e-4
    seed: int = 0

    def validate(self, n: int) -> None:
        if self.out_dims < 1:
            raise ConfigError("out_dims must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.perplexity < (n - 1) / 3:
            raise ConfigError(
                f"perplexity {self.perplexity} too large for n={n}; "
                f"needs perplexity < (n-1)/3 = {(n - 1) / 3:.2f}")


@dataclass
class SigmaResult:
    sigma: float
    conditionals: np.ndarray
    achieved_perplexity: float
    residual: float


def _conditionals_for_beta(sq_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Conditional distribution and its entropy (nats) for precision beta."""
    u = -beta * sq_row
    u_max = u.max()
    e = np.exp(u - u_max)
    z = e.sum()
    p = e / z
    entropy = math.log(z) + u_max + beta * float((sq_row * p).sum())
    return p, entropy


def calibrate_sigma(sq_distances: np.ndarray, perplexity: float,
                    tol: float = 1e-5, max_iter: int = 50) -> SigmaResult:
    """Binary search sigma so 2^entropy of the row's conditionals hits perplexity.

    Non-convergence is not an error: the best sigma is returned with its
    residual |achieved - target| recorded.
    """
    sq_row = np.asarray(sq_distances, dtype=float)
    if sq_row.size < 2 or not np.isfinite(sq_row).all():
        raise ContractError("need >= 2 finite squared distances")
    if not 0 < perplexity <= sq_row.size:
        raise ConfigError(f"perplexity must lie in (0, {sq_row.size}]")
    target_h = math.log(perplexity)
    beta = 1.0
    beta_min, beta_max = 0.0, math.inf
    p, h = _conditionals_for_beta(sq_row, beta)
    for _ in range(max_iter):
        if abs(math.exp(h) - perplexity) <= tol:
            break
        if h > target_h:      # too spread out: raise precision
            beta_min = beta
            beta = beta * 2.0 if math.isinf(beta_max) else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = beta / 2.0 if beta_min == 0.0 else (beta + beta_min) / 2.0
        p, h = _conditionals_for_beta(sq_row, beta)
    achieved = math.exp(h)
    return SigmaResult(math.sqrt(1.0 / (2.0 * beta)), p, achieved,
                       abs(achieved - perplexity))


def _pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    sums = (points ** 2).sum(axis=1)
    d = sums[:, None] + sums[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def joint_affinities(points: np.ndarray, perplexity: float) -> tuple[np.ndarray, list[SigmaResult]]:
    """Symmetrized, normalized affinity matrix P (zero diagonal, sums to 1)."""
    n = points.shape[0]
    d = _pairwise_sq_distances(points)
    cond = np.zeros((n, n))
    results = []
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        res = calibrate_sigma(d[i][mask[i]], perplexity)
        cond[i][mask[i]] = res.conditionals
        results.append(res)
    p = (cond + cond.T) / (2.0 * n)
    return p, results


@dataclass
class TsneResult:
    coords: np.ndarray
    kl_trace: list[float]
    sigma_results: list[SigmaResult]


def tsne(points: np.ndarray, config: TsneConfig | None = None) -> TsneResult:
    """Project (n, d) points to (n, out_dims); deterministic per seed."""
    config = config or TsneConfig()
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 10:
        raise ContractError("t-SNE needs an (n, d) matrix with n >= 10")
    n = points.shape[0]
    config.validate(n)

    p_true, sigma_results = joint_affinities(points, config.perplexity)
    p_true = np.maximum(p_true, _P_FLOOR)
    rng = np.random.default_rng(config.seed)
    y = rng.standard_normal((n, config.out_dims)) * config.init_scale
    velocity = np.zeros_like(y)
    # adaptive per-coordinate gains, as in the reference implementation
    gains = np.ones_like(y)
    kl_trace: list[float] = []
    off_diag = ~np.eye(n, dtype=bool)

    for it in range(config.iterations):
        num = 1.0 / (1.0 + _pairwise_sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), _P_FLOOR)

        kl = float((p_true[off_diag] * np.log(p_true[off_diag] / q[off_diag])).sum())
        if not math.isfinite(kl):
            raise ContractError(f"KL divergence became non-finite at iteration {it}")
        kl_trace.append(kl)

        p_eff = p_true * config.early_exaggeration if it < config.exaggeration_iters else p_true
        w = (p_eff - q) * num
        grad = 4.0 * ((np.diag(w.sum(axis=1)) - w) @ y)
        momentum = (config.momentum_start if it < config.momentum_switch_iter
                    else config.momentum_final)
        same_sign = (grad > 0) == (velocity > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - config.step_size * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    return TsneResult(y, kl_trace, sigma_results)
