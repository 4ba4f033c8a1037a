"""Differentiable calibration and prediction.

The quantile is the root ``q`` of a sigmoid-smoothed empirical CDF,
``sum_i sigmoid((q - v_i) / eps) = target``; its gradient follows from the
implicit function theorem.  Set membership replaces the hard comparison
against ``tau`` with a sigmoid of temperature ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _sigmoid
from .conformal import PredictorKind, conformal_level, oriented
from .errors import ContractError

BISECTION_TOL = 1e-10


@dataclass(frozen=True)
class SmoothingParams:
    temperature: float = 1.0
    dispersion: float = 0.1
    rank_dispersion: float = 0.1

    def __post_init__(self):
        if min(self.temperature, self.dispersion, self.rank_dispersion) <= 0:
            raise ContractError("temperature and dispersions must be positive")


def _log_sigmoid_prime(z: np.ndarray) -> np.ndarray:
    # log(s(z) * (1 - s(z))), stable for large |z|
    a = np.abs(z)
    return -a - 2.0 * np.log1p(np.exp(-a))


def _implicit_weights(q: float, values: np.ndarray, eps: float) -> np.ndarray:
    """dq/dv_i: normalized sigmoid derivatives, computed in log space."""
    logw = _log_sigmoid_prime((q - values) / eps)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _solve_quantile(values: np.ndarray, target: float, eps: float) -> float:
    def excess(q):
        return _sigmoid((q - values) / eps).sum() - target

    lo = values.min() - 20.0 * eps
    hi = values.max() + 20.0 * eps
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    # Newton polish inside the bracket so finite differences see a smooth map
    for _ in range(3):
        s = _sigmoid((q - values) / eps)
        slope = (s * (1.0 - s)).sum() / eps
        if slope <= 0:
            break
        step = q - (s.sum() - target) / slope
        if not lo - BISECTION_TOL <= step <= hi + BISECTION_TOL:
            break
        q = step
    return float(q)


def smooth_quantile(values, level: float, eps: float) -> Tensor:
    """Differentiable quantile of a 1-d tensor at ``level``.

    The target mass ``level * n`` is clamped to ``[0.5, n - 0.5]``.  The
    gradient w.r.t. ``values`` is non-negative and sums to one.
    """
    values = ad.as_tensor(values)
    if values.ndim != 1 or values.shape[0] < 1:
        raise ContractError(f"smooth_quantile expects a non-empty 1-d tensor, got {values.shape}")
    if not np.isfinite(values.data).all():
        raise ContractError("smooth_quantile got non-finite values")
    if eps <= 0:
        raise ContractError("dispersion must be positive")
    n = values.shape[0]
    target = float(np.clip(level * n, 0.5, n - 0.5)) if n > 1 else 0.5

    def forward(v):
        return np.asarray(_solve_quantile(v, target, eps))

    def backward(g, q, v):
        return (g * _implicit_weights(float(q), v, eps),)

    return ad.custom_grad(forward, backward)(values)


def smooth_predict_thr(scores, tau, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    return ad.sigmoid((ad.as_tensor(scores) - tau) * (1.0 / temperature))


def smooth_predict_aps(scores, tau, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    return ad.sigmoid((tau - ad.as_tensor(scores)) * (1.0 / temperature))


def smooth_predict(scores, tau, temperature: float, kind) -> Tensor:
    if PredictorKind(kind).is_thr:
        return smooth_predict_thr(scores, tau, temperature)
    return smooth_predict_aps(scores, tau, temperature)


def smooth_scores_aps(probs, u, rank_eps: float) -> Tensor:
    """Smooth APS scores via pairwise sigmoid rank comparisons.

    ``E(x, k) = sum_{j != k} p_j * sigmoid((p_j - p_k) / rank_eps) + u * p_k``.
    """
    if rank_eps <= 0:
        raise ContractError("rank dispersion must be positive")
    probs = ad.as_tensor(probs)
    b, k = probs.shape
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (b,)).reshape(b, 1)
    others = probs.reshape(b, 1, k)
    own = probs.reshape(b, k, 1)
    above = ad.sigmoid((others - own) * (1.0 / rank_eps))
    off_diagonal = 1.0 - np.eye(k)
    mass_above = (above * others * off_diagonal).sum(axis=2)
    return mass_above + probs * u


def smooth_calibrate(scores, labels, alpha: float, kind, eps: float) -> Tensor:
    """Smooth threshold from the true-class scores of a calibration batch.

    Mirrors the hard calibration: THR takes the smooth upper quantile of the
    negated scores, so both paths agree as ``eps -> 0``.
    """
    kind = PredictorKind(kind)
    true_scores = ad.pick(scores, labels)
    n = true_scores.shape[0]
    if n < 1:
        raise ContractError("smooth calibration needs at least one example")
    level = conformal_level(alpha, n)
    mass = level * n
    if mass > n + 0.5:
        raise ContractError(
            f"{n} calibration examples are too few for alpha={alpha}: "
            f"conformal level {level:.4g} asks for mass {mass:.3g} > n + 0.5"
        )
    tau = smooth_quantile(oriented(kind, true_scores), level, eps)
    return -tau if kind.is_thr else tau
