"""Confidence-set metrics and the repeated calibration/test trial protocol."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import conformal as cp
from . import models
from .conformal import PredictorKind
from .errors import ContractError, FormatError

BASE_METRICS = ("coverage", "inefficiency", "accuracy")
GROUP_METRICS = ("miscoverage_0to1", "miscoverage_1to0")


def _check(sets, labels):
    sets = np.asarray(sets, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if sets.ndim != 2 or sets.shape[0] != labels.shape[0]:
        raise ContractError(f"need [n, K] sets and n labels, got {sets.shape} and {labels.shape}")
    return sets, labels


def coverage_and_inefficiency(sets, labels) -> tuple[float, float]:
    sets, labels = _check(sets, labels)
    if len(labels) == 0:
        raise ContractError("metrics of an empty test set")
    covered = sets[np.arange(len(labels)), labels]
    return float(covered.mean()), float(sets.sum(axis=1).mean())


def class_conditional_ineff(sets, labels, num_classes: int | None = None) -> np.ndarray:
    """Mean set size per true class; NaN marks classes absent from ``labels``."""
    sets, labels = _check(sets, labels)
    k = sets.shape[1] if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sizes = np.bincount(labels, weights=sets.sum(axis=1), minlength=k)
    out = np.full(k, np.nan)
    present = counts > 0
    out[present] = sizes[present] / counts[present]
    return out


def coverage_confusion(sets, labels) -> np.ndarray:
    """``S[y, k]``: fraction of all test examples with label ``y`` whose set contains ``k``."""
    sets, labels = _check(sets, labels)
    k = sets.shape[1]
    sigma = np.zeros((k, k))
    np.add.at(sigma, labels, sets.astype(np.float64))
    return sigma / max(len(labels), 1)


def mis_coverage(sets, labels, group0: Sequence[int], group1: Sequence[int]) -> tuple[float, float]:
    """Directed rates at which one class group's sets contain any class of the other group."""
    sets, labels = _check(sets, labels)
    g0, g1 = set(int(c) for c in group0), set(int(c) for c in group1)
    if not g0 or not g1:
        raise ContractError("class groups must be non-empty")
    if g0 & g1:
        raise ContractError(f"class groups overlap: {sorted(g0 & g1)}")

    def rate(src, dst):
        rows = np.isin(labels, sorted(src))
        if not rows.any():
            return math.nan
        return float(sets[rows][:, sorted(dst)].any(axis=1).mean())

    return rate(g0, g1), rate(g1, g0)


def resample_training_set(x, y, trial: int, seed: int):
    """Bootstrap sample (with replacement, same size) keyed by ``(seed, trial)``."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("cannot resample an empty training set")
    rng = np.random.default_rng([seed, 2, trial])
    idx = rng.integers(0, len(y), size=len(y))
    return np.asarray(x)[idx], y[idx]


@dataclass(frozen=True)
class EvalProtocol:
    alpha: float = 0.01
    n_test_trials: int = 10
    n_train_trials: int = 10
    kinds: tuple[PredictorKind, ...] = cp.ALL_KINDS
    seed: int = 0
    groups: tuple[tuple[int, ...], tuple[int, ...]] | None = None
    keep_original_split: bool = False

    def __post_init__(self):
        if self.n_test_trials < 1 or self.n_train_trials < 1:
            raise ContractError("trial counts must be at least 1")
        if not 0 < self.alpha < 1:
            raise ContractError("alpha must lie in (0, 1)")
        object.__setattr__(self, "kinds", tuple(PredictorKind(k) for k in self.kinds))
        if self.groups is not None:
            g0, g1 = (tuple(int(c) for c in g) for g in self.groups)
            if not g0 or not g1 or set(g0) & set(g1):
                raise ContractError("groups must be two non-empty disjoint class lists")
            object.__setattr__(self, "groups", (g0, g1))


@dataclass
class KindReport:
    """Metric grids of shape [training trials, test trials] plus averaged diagnostics."""

    grids: dict[str, np.ndarray]
    class_ineff: np.ndarray
    coverage_confusion: np.ndarray

    def summary(self, metric: str) -> dict:
        grid = self.grids[metric]
        finite = np.where(np.isfinite(grid), grid, np.nan)
        return {
            "mean": _nan_float(np.nanmean(finite)),
            "std": _nan_float(np.nanstd(finite)),
            # spread over test trials for a fixed model, averaged over models
            "std_test": _nan_float(np.nanmean(np.nanstd(finite, axis=1))),
            # spread of the per-model means across training trials
            "std_train": _nan_float(np.nanstd(np.nanmean(finite, axis=1))),
        }


def _nan_float(v) -> float:
    return float(v)


def _to_json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass
class TrialReport:
    alpha: float
    n_train_trials: int
    n_test_trials: int
    num_classes: int
    kinds: dict[str, KindReport] = field(default_factory=dict)
    groups: tuple | None = None
    label: str = ""

    def metrics(self) -> tuple[str, ...]:
        return BASE_METRICS + (GROUP_METRICS if self.groups is not None else ())

    def mean(self, kind, metric: str) -> float:
        return self.kinds[str(PredictorKind(kind))].summary(metric)["mean"]

    def to_dict(self) -> dict:
        out = {
            "format_version": 1,
            "label": self.label,
            "alpha": self.alpha,
            "n_train_trials": self.n_train_trials,
            "n_test_trials": self.n_test_trials,
            "num_classes": self.num_classes,
            "groups": [list(g) for g in self.groups] if self.groups is not None else None,
            "kinds": {},
        }
        for name, kr in self.kinds.items():
            out["kinds"][name] = {
                "metrics": {
                    m: {k: _to_json_value(v) for k, v in kr.summary(m).items()} for m in self.metrics()
                },
                "class_ineff": [_to_json_value(float(v)) for v in kr.class_ineff],
                "coverage_confusion": kr.coverage_confusion.tolist(),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[dict]:
        rows = []
        for name, kr in self.kinds.items():
            for m in self.metrics():
                rows.append({"kind": name, "metric": m, **kr.summary(m)})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["kind", "metric", "mean", "std", "std_test", "std_train"], lineterminator="\n"
        )
        writer.writeheader()
        for row in self.csv_rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, directory, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = directory / f"{stem}.json", directory / f"{stem}.csv"
        json_path.write_text(self.to_json())
        csv_path.write_text(self.to_csv())
        return json_path, csv_path


def load_report(path) -> dict:
    """Read a JSON trial report written by :meth:`TrialReport.write`."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable report ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != 1 or not isinstance(doc.get("kinds"), dict):
        raise FormatError(f"{path}: not a trial report")
    for name, block in doc["kinds"].items():
        if not isinstance(block, dict) or "metrics" not in block or "class_ineff" not in block:
            raise FormatError(f"{path}: kind {name!r} is malformed")
    return doc


def split_trial(n_pool: int, n_cal: int, test_trial: int, seed: int, keep_original: bool = False):
    """Calibration and test indices into the pooled examples for one trial."""
    if keep_original and test_trial == 0:
        perm = np.arange(n_pool)
    else:
        perm = np.random.default_rng([seed, 3, test_trial]).permutation(n_pool)
    return perm[:n_cal], perm[n_cal:]


def aps_randomization(n_pool: int, test_trial: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 4, test_trial]).uniform(size=n_pool)


def evaluate_logits(
    logits_per_model: Sequence[np.ndarray],
    labels,
    n_cal: int,
    protocol: EvalProtocol,
    label: str = "",
) -> TrialReport:
    """Run every (training trial, test trial) pair on precomputed pool logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n_pool = len(labels)
    if not 1 <= n_cal < n_pool:
        raise ContractError(f"pool of {n_pool} cannot be split into {n_cal} calibration examples and a test set")
    k = logits_per_model[0].shape[1]
    metrics = BASE_METRICS + (GROUP_METRICS if protocol.groups is not None else ())
    n_models, n_trials = len(logits_per_model), protocol.n_test_trials
    report = TrialReport(protocol.alpha, n_models, n_trials, k, groups=protocol.groups, label=label)
    splits = [split_trial(n_pool, n_cal, t, protocol.seed, protocol.keep_original_split) for t in range(n_trials)]
    u_draws = [aps_randomization(n_pool, t, protocol.seed) for t in range(n_trials)]

    for kind in protocol.kinds:
        grids = {m: np.zeros((n_models, n_trials)) for m in metrics}
        class_ineff = np.zeros((n_models, n_trials, k))
        confusion = np.zeros((k, k))
        for i, logits in enumerate(logits_per_model):
            if logits.shape != (n_pool, k):
                raise ContractError("all models must produce [n_pool, K] logits")
            predicted = np.argmax(logits, axis=1)
            for t, (cal_idx, test_idx) in enumerate(splits):
                scored = cp.scores_from_logits(logits, kind, labels, u=u_draws[t])
                cal = cp.calibrate(
                    cp.ScoredBatch(scored.scores[cal_idx], kind, labels[cal_idx]), protocol.alpha
                )
                test_labels = labels[test_idx]
                sets = cp.predict(cp.ScoredBatch(scored.scores[test_idx], kind), cal)
                cov, ineff = coverage_and_inefficiency(sets, test_labels)
                grids["coverage"][i, t] = cov
                grids["inefficiency"][i, t] = ineff
                grids["accuracy"][i, t] = float(np.mean(predicted[test_idx] == test_labels))
                if protocol.groups is not None:
                    m01, m10 = mis_coverage(sets, test_labels, *protocol.groups)
                    grids["miscoverage_0to1"][i, t] = m01
                    grids["miscoverage_1to0"][i, t] = m10
                class_ineff[i, t] = class_conditional_ineff(sets, test_labels, k)
                confusion += coverage_confusion(sets, test_labels)
        with np.errstate(invalid="ignore"):
            mean_class = np.full(k, np.nan)
            seen = np.isfinite(class_ineff).any(axis=(0, 1))
            mean_class[seen] = np.nanmean(class_ineff[:, :, seen], axis=(0, 1))
        report.kinds[str(kind)] = KindReport(grids, mean_class, confusion / (n_models * n_trials))
    return report


def run_trials(
    checkpoints: Sequence[models.ModelParams],
    pool_x,
    pool_y,
    n_cal: int,
    protocol: EvalProtocol,
    label: str = "",
) -> TrialReport:
    """Evaluate each model on ``protocol.n_test_trials`` random calibration/test splits of the pool.

    The pool is re-split at the original sizes (``n_cal`` calibration
    examples, the rest test) for every trial.
    """
    if len(checkpoints) not in (1, protocol.n_train_trials):
        raise ContractError(
            f"got {len(checkpoints)} checkpoints for {protocol.n_train_trials} training trials"
        )
    logits = [models.predict_logits(p, pool_x) for p in checkpoints]
    return evaluate_logits(logits, pool_y, n_cal, protocol, label)
