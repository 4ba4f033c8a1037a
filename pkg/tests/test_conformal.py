import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftr import conformal as cp
from conftr.conformal import PredictorKind, ScoredBatch
from conftr.errors import ContractError

GRID = np.array([-1.0, 0.0, 0.25, 2.0, 7.5])
LEVELS = [Fraction(s) for s in ("0.05", "0.1", "0.25", "0.31", "0.5", "0.9", "1", "1.05")]


def oracle_quantile(values, level: Fraction):
    """Smallest v with #{x <= v} >= ceil(level * n), by counting."""
    n = len(values)
    m = level * n
    if m < 1:
        return -math.inf
    if m > n:
        return math.inf
    k = math.ceil(m)
    for v in sorted(values):
        if sum(x <= v for x in values) >= k:
            return v
    raise AssertionError("unreachable")


class TestQuantile:
    def test_single(self):
        assert cp.quantile([5.0], 1.0) == 5.0
        assert cp.quantile([5.0], 0.5) == -math.inf

    def test_order_statistic(self):
        assert cp.quantile(np.arange(1.0, 11.0), 0.31) == 4.0

    def test_low_sentinel(self):
        assert cp.quantile(np.arange(1.0, 11.0), 0.05) == -math.inf

    def test_high_sentinel(self):
        assert cp.quantile(np.arange(1.0, 11.0), 1.11) == math.inf

    def test_round_off_in_conformal_level(self):
        # 0.1 * (1 + 1/9) * 9 is 1.0000000000000002 in floating point; k must be 1
        assert cp.quantile(np.arange(1.0, 10.0), 0.1 * (1 + 1 / 9)) == 1.0

    def test_empty(self):
        with pytest.raises(ContractError):
            cp.quantile([], 0.5)

    @pytest.mark.parametrize("length", range(1, 6))
    def test_exhaustive_small_grid(self, length):
        for values in itertools.product(GRID, repeat=length):
            for level in LEVELS:
                assert cp.quantile(values, float(level)) == oracle_quantile(values, level)


class TestScores:
    def test_thr_identity(self):
        s = cp.conformity_scores_thr([[0.7, 0.2, 0.1]], "THR_prob")
        np.testing.assert_array_equal(s.scores, [[0.7, 0.2, 0.1]])

    def test_thr_logprob(self):
        s = cp.conformity_scores_thr(np.log([[0.5, 0.5]]), "THR_logprob")
        np.testing.assert_allclose(s.scores, [[-math.log(2)] * 2])

    def test_thr_logit_passthrough(self):
        row = [[3.5, -20.0, 1e3]]
        np.testing.assert_array_equal(cp.conformity_scores_thr(row, "THR_logit").scores, row)

    def test_thr_prob_rows_must_sum_to_one(self):
        with pytest.raises(ContractError):
            cp.conformity_scores_thr([[0.7, 0.2]], "THR_prob")

    def test_aps_u_one_is_cumsum(self):
        s = cp.conformity_scores_aps([[0.5, 0.3, 0.2]], 1.0)
        np.testing.assert_allclose(s.scores, [[0.5, 0.8, 1.0]])

    def test_aps_u_zero_drops_own_mass(self):
        s = cp.conformity_scores_aps([[0.5, 0.3, 0.2]], 0.0)
        np.testing.assert_allclose(s.scores, [[0.0, 0.5, 0.8]])

    def test_aps_matches_naive(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(5))
        u = 0.37
        order = sorted(range(5), key=lambda k: (-p[k], k))
        want = np.zeros(5)
        for r, k in enumerate(order):
            want[k] = sum(p[j] for j in order[:r]) + u * p[k]
        got = cp.conformity_scores_aps(p[None], u).scores[0]
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_aps_ties_by_class_index(self):
        s = cp.conformity_scores_aps([[0.25, 0.25, 0.5]], 1.0)
        np.testing.assert_allclose(s.scores, [[0.75, 1.0, 0.5]])

    def test_aps_u_range(self):
        with pytest.raises(ContractError):
            cp.conformity_scores_aps([[0.5, 0.5]], 1.5)


class TestCalibrate:
    def test_thr_single(self):
        sb = ScoredBatch(np.array([[0.4, 0.6]]), PredictorKind.THR_prob, np.array([1]))
        assert cp.calibrate(sb, 0.5).tau == 0.6

    def test_thr_order_statistic(self):
        true = np.arange(1, 11) / 10
        scores = np.stack([true, 1 - true], axis=1)
        sb = ScoredBatch(scores, PredictorKind.THR_prob, np.zeros(10, dtype=int))
        # floor(0.25 * 11) = 2nd smallest
        cal = cp.calibrate(sb, 0.25)
        assert cal.tau == pytest.approx(0.2)
        assert cal.n_cal == 10

    def test_aps_order_statistic(self):
        rng = np.random.default_rng(1)
        true = rng.uniform(size=19)
        sb = ScoredBatch(np.stack([true, true], 1), PredictorKind.APS, np.zeros(19, dtype=int))
        assert cp.calibrate(sb, 0.1).tau == np.sort(true)[17]

    def test_kind_mismatch(self):
        sb = ScoredBatch(np.zeros((2, 2)), PredictorKind.THR_logit, np.zeros(2, dtype=int))
        with pytest.raises(ContractError):
            cp.calibrate(sb, 0.1, "APS")


class TestPredict:
    def test_thr(self):
        sets = cp.predict(
            ScoredBatch(np.array([[0.7, 0.2, 0.1]]), PredictorKind.THR_prob),
            cp.CalibrationResult(0.15, PredictorKind.THR_prob, 0.1, 10),
        )
        np.testing.assert_array_equal(sets, [[True, True, False]])

    def test_aps(self):
        sets = cp.predict(
            ScoredBatch(np.array([[0.5, 0.8, 1.0]]), PredictorKind.APS),
            cp.CalibrationResult(0.8, PredictorKind.APS, 0.1, 10),
        )
        np.testing.assert_array_equal(sets, [[True, True, False]])

    @pytest.mark.parametrize("kind, tau", [("THR_logit", -math.inf), ("APS", math.inf)])
    def test_sentinels_give_full_sets(self, kind, tau):
        kind = PredictorKind(kind)
        sets = cp.predict(ScoredBatch(np.random.default_rng(2).normal(size=(3, 4)), kind),
                          cp.CalibrationResult(tau, kind, 0.1, 1))
        assert sets.all()

    def test_kind_mismatch(self):
        with pytest.raises(ContractError):
            cp.predict(ScoredBatch(np.zeros((1, 2)), PredictorKind.APS),
                       cp.CalibrationResult(0.0, PredictorKind.THR_prob, 0.1, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(0, 1))
def test_thr_monotone_in_tau(seed, tau, delta):
    scores = ScoredBatch(np.random.default_rng(seed).normal(size=(4, 5)), PredictorKind.THR_logit)
    low = cp.predict(scores, cp.CalibrationResult(tau, PredictorKind.THR_logit, 0.1, 1))
    high = cp.predict(scores, cp.CalibrationResult(tau + delta, PredictorKind.THR_logit, 0.1, 1))
    assert not (high & ~low).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_aps_monotone_and_prefix(seed, tau, delta):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(6), size=4)
    scores = cp.conformity_scores_aps(probs, 1.0)
    low = cp.predict(scores, cp.CalibrationResult(tau, PredictorKind.APS, 0.1, 1))
    high = cp.predict(scores, cp.CalibrationResult(tau + delta, PredictorKind.APS, 0.1, 1))
    assert not (low & ~high).any()
    order = np.argsort(-probs, axis=1, kind="stable")
    ranked = np.take_along_axis(low, order, axis=1)
    # membership of rank r implies membership of every higher-probability rank
    assert (np.diff(ranked.astype(int), axis=1) <= 0).all()


def _synthetic_logits(rng, n, k=5):
    centers = rng.integers(0, k, size=n)
    return rng.normal(size=(n, k)) + 2.0 * np.eye(k)[centers], centers


@pytest.mark.parametrize("kind", ["THR_prob", "APS"])
def test_marginal_coverage_band(kind):
    """Mean coverage over resampled splits sits inside the finite-sample band."""
    rng = np.random.default_rng(3)
    n_cal, n_test, trials, alpha = 200, 200, 1000, 0.1
    logits, labels = _synthetic_logits(rng, n_cal + n_test)
    covs = []
    for t in range(trials):
        perm = rng.permutation(len(labels))
        u = rng.uniform(size=len(labels))
        scored = cp.scores_from_logits(logits, kind, labels, u)
        c, te = perm[:n_cal], perm[n_cal:]
        cal = cp.calibrate(ScoredBatch(scored.scores[c], scored.kind, labels[c]), alpha)
        sets = cp.predict(ScoredBatch(scored.scores[te], scored.kind), cal)
        covs.append(sets[np.arange(n_test), labels[te]].mean())
    covs = np.asarray(covs)
    se = covs.std(ddof=1) / np.sqrt(trials)
    assert 1 - alpha - 3 * se <= covs.mean() <= 1 - alpha + 1 / (n_cal + 1) + 3 * se
