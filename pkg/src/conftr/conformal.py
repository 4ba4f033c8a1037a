"""Split conformal prediction with threshold (THR) and adaptive (APS) predictors.

THR variants put class ``k`` in the set when its score ``E(x, k) >= tau``;
APS puts it in when ``E(x, k) <= tau``.  Calibration picks ``tau`` as an
order statistic of the true-class scores at a finite-sample-corrected level:
the ``ceil((1 - alpha)(n + 1))``-th smallest for APS and, mirrored, the
``floor(alpha (n + 1))``-th smallest for THR.  Both give coverage of at least
``1 - alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, ShapeError

# guards ceil() against round-off in level * n, e.g. 0.1 * (1 + 1/9) * 9
_LEVEL_TOL = 1e-9


class PredictorKind(str, Enum):
    THR_prob = "THR_prob"
    THR_logit = "THR_logit"
    THR_logprob = "THR_logprob"
    APS = "APS"

    @property
    def is_thr(self) -> bool:
        return self is not PredictorKind.APS

    def __str__(self) -> str:
        return self.value


ALL_KINDS = tuple(PredictorKind)


@dataclass(frozen=True)
class ScoredBatch:
    """Conformity scores ``E(x, k)`` for every example and class."""

    scores: np.ndarray
    kind: PredictorKind
    labels: np.ndarray | None = None

    def true_class_scores(self) -> np.ndarray:
        if self.labels is None:
            raise ContractError("scores carry no labels")
        return self.scores[np.arange(len(self.labels)), self.labels]


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    kind: PredictorKind
    alpha: float
    n_cal: int


def quantile(values, level: float) -> float:
    """The ``ceil(level * n)``-th smallest value, with infinite sentinels.

    ``level * n < 1`` gives ``-inf`` and ``level * n > n`` gives ``+inf``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if n == 0:
        raise ContractError("quantile of an empty array")
    m = level * n
    if m < 1 - _LEVEL_TOL:
        return -math.inf
    if m > n + _LEVEL_TOL:
        return math.inf
    k = min(max(math.ceil(m - _LEVEL_TOL * max(1.0, m)), 1), n)
    return float(np.partition(values, k - 1)[k - 1])


def _as_kind(kind) -> PredictorKind:
    try:
        return PredictorKind(kind)
    except ValueError as exc:
        raise ContractError(f"unknown predictor kind {kind!r}") from exc


def conformity_scores_thr(outputs, kind, labels=None) -> ScoredBatch:
    kind = _as_kind(kind)
    if not kind.is_thr:
        raise ContractError("conformity_scores_thr needs a THR kind")
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 2:
        raise ShapeError(f"expected [b, K] outputs, got {outputs.shape}")
    if kind is PredictorKind.THR_prob and not np.allclose(outputs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ContractError("THR_prob expects rows of probabilities summing to 1")
    return ScoredBatch(outputs, kind, _labels(labels, outputs))


def conformity_scores_aps(probs, u, labels=None) -> ScoredBatch:
    """Randomized cumulative-mass scores.

    For the class at descending-probability rank ``r`` the score is the mass
    of ranks ``< r`` plus ``u`` times its own probability.  Equal
    probabilities are ranked by ascending class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"expected [b, K] probabilities, got {probs.shape}")
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (probs.shape[0],))
    if np.any((u < 0) | (u > 1)):
        raise ContractError("APS randomization u must lie in [0, 1]")
    order = np.argsort(-probs, axis=1, kind="stable")
    ranked = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(ranked, axis=1)
    ranked_scores = cum - ranked + u[:, None] * ranked
    scores = np.empty_like(probs)
    np.put_along_axis(scores, order, ranked_scores, axis=1)
    return ScoredBatch(scores, PredictorKind.APS, _labels(labels, probs))


def _labels(labels, outputs):
    if labels is None:
        return None
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (outputs.shape[0],):
        raise ShapeError("one label per example expected")
    if labels.size and (labels.min() < 0 or labels.max() >= outputs.shape[1]):
        raise ContractError("labels outside [0, K)")
    return labels


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def scores_from_logits(logits, kind, labels=None, u=None) -> ScoredBatch:
    """Conformity scores of ``kind`` computed from raw model logits."""
    kind = _as_kind(kind)
    logits = np.asarray(logits, dtype=np.float64)
    if kind is PredictorKind.THR_logit:
        return conformity_scores_thr(logits, kind, labels)
    if kind is PredictorKind.THR_logprob:
        return conformity_scores_thr(_log_softmax(logits), kind, labels)
    probs = _softmax(logits)
    if kind is PredictorKind.THR_prob:
        return conformity_scores_thr(probs, kind, labels)
    if u is None:
        raise ContractError("APS scores need explicit randomization u")
    return conformity_scores_aps(probs, u, labels)


def conformal_level(alpha: float, n: int) -> float:
    """Quantile level of the upper-tail order statistic used for calibration."""
    return (1.0 - alpha) * (1.0 + 1.0 / n)


def oriented(kind, values):
    """Map scores so that larger means less conforming (THR scores are negated)."""
    return -values if _as_kind(kind).is_thr else values


def calibrate(scores: ScoredBatch, alpha: float, kind=None) -> CalibrationResult:
    kind = scores.kind if kind is None else _as_kind(kind)
    if kind is not scores.kind:
        raise ContractError(f"scores are {scores.kind}, calibration asked for {kind}")
    if not 0.0 < alpha < 1.0:
        raise ContractError("alpha must lie in (0, 1)")
    true_scores = scores.true_class_scores()
    n = true_scores.size
    if n < 1:
        raise ContractError("calibration needs at least one example")
    # THR thresholds from below: upper quantile of the negated scores
    tau = quantile(oriented(kind, true_scores), conformal_level(alpha, n))
    if kind.is_thr:
        tau = -tau
    return CalibrationResult(tau=tau, kind=kind, alpha=alpha, n_cal=n)


def predict(scores: ScoredBatch, cal: CalibrationResult) -> np.ndarray:
    """Boolean ``[b, K]`` membership of each class in each confidence set."""
    if scores.kind is not cal.kind:
        raise ContractError(f"scores are {scores.kind} but calibration is {cal.kind}")
    if cal.kind.is_thr:
        return scores.scores >= cal.tau
    return scores.scores <= cal.tau
