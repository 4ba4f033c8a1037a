"""Training loops: cross-entropy baseline, conformal training and fixed-threshold coverage training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses, models, smooth
from .autodiff import Tensor
from .conformal import PredictorKind
from .errors import ContractError, NumericalError, StepError

log = logging.getLogger(__name__)

METHODS = ("baseline", "conftr", "conftr_class", "covertr")
COVERTR_VARIANTS = ("class", "bellotti")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "baseline"
    predictor_kind: PredictorKind = PredictorKind.THR_logprob
    alpha: float = 0.01
    batch_size: int = 100
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.0005
    nesterov: bool = True
    size_weight: float = 0.01
    kappa: int = 1
    temperature: float = 0.5
    dispersion: float = 0.1
    rank_dispersion: float = 0.1
    fixed_tau: float | None = None
    covertr_variant: str = "class"
    loss_matrix: list | None = None
    size_weights: list | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predictor_kind", PredictorKind(self.predictor_kind))
        if self.method not in METHODS:
            raise ContractError(f"unknown training method {self.method!r}")
        if self.kappa not in (0, 1):
            raise ContractError("kappa must be 0 or 1")
        if not 0 < self.alpha < 1:
            raise ContractError("alpha must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be positive and epochs non-negative")
        if self.method in ("conftr", "conftr_class") and self.batch_size < 2:
            raise ContractError("conformal training splits each batch in half and needs batch_size >= 2")
        if self.method == "covertr":
            if self.fixed_tau is None:
                raise ContractError("covertr needs fixed_tau")
            if self.size_weight <= 0:
                raise ContractError("covertr needs a positive size weight")
            if self.covertr_variant not in COVERTR_VARIANTS:
                raise ContractError(f"covertr_variant must be one of {COVERTR_VARIANTS}")
        if min(self.temperature, self.dispersion, self.rank_dispersion) <= 0:
            raise ContractError("temperature and dispersions must be positive")
        if self.lr <= 0 or self.momentum < 0 or self.size_weight < 0 or self.weight_decay < 0:
            raise ContractError("lr must be positive; momentum, size_weight, weight_decay non-negative")


@dataclass
class OptimizerState:
    velocity: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params])


def step_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, epoch, batch)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1, epoch, batch])))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, epoch])))


def lr_schedule(epoch: int, total_epochs: int, lr0: float) -> float:
    """Decay by 0.1 after 2/5, 3/5 and 4/5 of the epochs."""
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    milestones = [(2 * total_epochs) // 5, (3 * total_epochs) // 5, (4 * total_epochs) // 5]
    passed = sum(1 for m in milestones if 0 < m <= epoch)
    return lr0 * 0.1**passed


def sgd_update(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    nesterov: bool,
) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        v = momentum * state.velocity[i] + g
        state.velocity[i] = v
        step = g + momentum * v if nesterov else v
        p.data = p.data - lr * step


# ---------------------------------------------------------------------------
# Per-batch objectives
# ---------------------------------------------------------------------------


def training_scores(logits: Tensor, kind: PredictorKind, u, rank_dispersion: float) -> Tensor:
    """Differentiable conformity scores used during training."""
    kind = PredictorKind(kind)
    if kind is PredictorKind.THR_logit:
        return logits
    if kind is PredictorKind.THR_logprob:
        return ad.log_softmax(logits)
    probs = ad.softmax(logits)
    if kind is PredictorKind.THR_prob:
        return probs
    return smooth.smooth_scores_aps(probs, u, rank_dispersion)


def split_batch(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint calibration/prediction halves; calibration gets floor(n/2)."""
    perm = rng.permutation(n)
    return perm[: n // 2], perm[n // 2:]


def _set_losses(membership, labels, cfg: TrainConfig, use_class_loss: bool, kappa: int):
    num_classes = membership.shape[1]
    weights = None if cfg.size_weights is None else losses.size_weights(cfg.size_weights, num_classes)
    size_term = losses.size_loss(membership, kappa, labels, weights)
    class_term = (
        losses.classification_loss(membership, labels, cfg.loss_matrix) if use_class_loss else 0.0
    )
    return class_term, size_term


def conftr_loss(params: models.ModelParams, x, y, cfg: TrainConfig, rng: np.random.Generator) -> Tensor:
    """Conformal training objective on one mini-batch.

    The batch is split at random; the threshold is smoothly calibrated on one
    half and soft confidence sets are built on the other half only.
    """
    y = np.asarray(y, dtype=np.int64)
    cal, pred = split_batch(len(y), rng)
    u = rng.uniform(size=len(y)) if cfg.predictor_kind is PredictorKind.APS else None
    logits = models.forward(params, x)
    scores = training_scores(logits, cfg.predictor_kind, u, cfg.rank_dispersion)
    tau = smooth.smooth_calibrate(scores[cal], y[cal], cfg.alpha, cfg.predictor_kind, cfg.dispersion)
    membership = smooth.smooth_predict(scores[pred], tau, cfg.temperature, cfg.predictor_kind)
    class_term, size_term = _set_losses(
        membership, y[pred], cfg, cfg.method == "conftr_class", cfg.kappa
    )
    loss = losses.conftr_objective(class_term, size_term, cfg.size_weight)
    return loss + losses.weight_penalty(params.tensors(), cfg.weight_decay)


def covertr_loss(params: models.ModelParams, x, y, cfg: TrainConfig, rng: np.random.Generator) -> Tensor:
    """Coverage training at a fixed threshold over the whole batch."""
    y = np.asarray(y, dtype=np.int64)
    u = rng.uniform(size=len(y)) if cfg.predictor_kind is PredictorKind.APS else None
    logits = models.forward(params, x)
    scores = training_scores(logits, cfg.predictor_kind, u, cfg.rank_dispersion)
    membership = smooth.smooth_predict(scores, cfg.fixed_tau, cfg.temperature, cfg.predictor_kind)
    if cfg.covertr_variant == "bellotti":
        class_term = losses.coverage_loss_batch(membership, y, cfg.alpha)
        _, size_term = _set_losses(membership, y, cfg, False, 0)
    else:
        class_term, size_term = _set_losses(membership, y, cfg, True, cfg.kappa)
    loss = losses.conftr_objective(class_term, size_term, cfg.size_weight)
    return loss + losses.weight_penalty(params.tensors(), cfg.weight_decay)


def baseline_loss(params: models.ModelParams, x, y, cfg: TrainConfig, rng=None) -> Tensor:
    loss = losses.cross_entropy(models.forward(params, x), y)
    return loss + losses.weight_penalty(params.tensors(), cfg.weight_decay)


OBJECTIVES = {
    "baseline": baseline_loss,
    "conftr": conftr_loss,
    "conftr_class": conftr_loss,
    "covertr": covertr_loss,
}


def train_step(
    params: models.ModelParams,
    x,
    y,
    cfg: TrainConfig,
    state: OptimizerState,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """One SGD step on a batch; returns the batch loss before the update."""
    tensors = params.tensors()
    loss = OBJECTIVES[cfg.method](params, x, y, cfg, rng)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    grads = ad.grad(loss, tensors)
    sgd_update(tensors, grads, state, lr, cfg.momentum, cfg.nesterov)
    return value


def conftr_step(params, x, y, cfg: TrainConfig, state: OptimizerState, lr: float, rng) -> float:
    if cfg.method not in ("conftr", "conftr_class"):
        cfg = replace(cfg, method="conftr")
    return train_step(params, x, y, cfg, state, lr, rng)


def covertr_step(params, x, y, cfg: TrainConfig, state: OptimizerState, lr: float, rng) -> float:
    if cfg.method != "covertr":
        cfg = replace(cfg, method="covertr")
    return train_step(params, x, y, cfg, state, lr, rng)


def _batches(n: int, batch_size: int, drop_last: bool, rng: np.random.Generator):
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def train(
    x,
    y,
    model: models.ModelSpec | models.ModelParams,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[models.ModelParams, list[dict]]:
    """Run ``cfg.epochs`` epochs of SGD and return the final parameters and per-epoch log.

    ``model`` is either a spec (initialized from ``cfg.seed``) or existing
    parameters to continue from (copied, never mutated).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if isinstance(model, models.ModelSpec):
        params = models.init(model, cfg.seed)
    else:
        params = model.copy()
    drop_last = cfg.method != "baseline"
    if drop_last and len(y) < cfg.batch_size:
        raise ContractError(f"{len(y)} training examples cannot fill one batch of {cfg.batch_size}")

    state = OptimizerState.zeros_like(params.tensors())
    history: list[dict] = []
    sink = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.epochs, cfg.lr)
            total, count = 0.0, 0
            for b, idx in enumerate(_batches(len(y), cfg.batch_size, drop_last, epoch_rng(cfg.seed, epoch))):
                try:
                    value = train_step(params, x[idx], y[idx], cfg, state, lr, step_rng(cfg.seed, epoch, b))
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
                except ContractError as exc:
                    raise StepError(f"epoch {epoch}, batch {b}: {exc}") from exc
                total += value * len(idx)
                count += len(idx)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": total / max(count, 1),
                "train_acc": models.accuracy(models.predict_logits(params, x), y),
            }
            history.append(record)
            log.debug("epoch %d: %s", epoch, record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return params, history
