"""
Tests for FDP estimators, realized metrics and replication aggregates
"""
import math

import pytest

from fdp_estimators import (
    StreamMetrics,
    aggregate_fdr,
    alpha_fraction_bound,
    fdp_hat_0,
    fdp_hat_lambda,
    realized_fdp,
    stream_metrics,
)
from procedure_engine import build_procedure, run_stream
from testing_state import (
    EstimatorApplicabilityError,
    InsufficientDataError,
    ParameterDomainError,
    advance,
)


def _metrics(fdp, rejections=1, false_discoveries=0, t=10):
    return StreamMetrics(t=t, fdp_hat_0=0.0, fdp_hat_lambda=None, fdp=fdp, rejections=rejections,
                         true_discoveries=rejections - false_discoveries,
                         false_discoveries=false_discoveries, false_nulls=rejections, power=1.0)


class TestFdpHat0:
    def test_empty_prefix(self, empty_state):
        assert fdp_hat_0(empty_state, 0) == 0.0

    def test_one_rejection(self, empty_state):
        state = advance(advance(empty_state, 0.001, 0.005), 0.9, 0.0045)
        assert fdp_hat_0(state, 2) == pytest.approx(0.0095)

    def test_two_rejections(self, empty_state):
        state = advance(advance(empty_state, 0.001, 0.005), 0.001, 0.0045)
        assert fdp_hat_0(state, 2) == pytest.approx(0.00475)

    def test_prefix_argument(self, empty_state):
        state = advance(advance(empty_state, 0.001, 0.005), 0.9, 0.0045)
        assert fdp_hat_0(state, 1) == pytest.approx(0.005)
        with pytest.raises(ParameterDomainError):
            fdp_hat_0(state, 3)


class TestFdpHatLambda:
    def test_non_candidate(self, empty_state):
        state = advance(empty_state, 0.6, 0.0025, lmbda=0.5, alpha_bar=0.0025)
        assert fdp_hat_lambda(state, 1) == pytest.approx(0.005)

    def test_candidate(self, empty_state):
        state = advance(empty_state, 0.3, 0.0025, lmbda=0.5, alpha_bar=0.0025)
        assert fdp_hat_lambda(state, 1) == 0.0

    def test_empty(self, empty_state):
        assert fdp_hat_lambda(empty_state, 0) == 0.0

    def test_needs_lambda(self, empty_state):
        state = advance(empty_state, 0.3, 0.005)
        with pytest.raises(EstimatorApplicabilityError):
            fdp_hat_lambda(state, 1)


class TestRealizedFdp:
    def test_no_rejections(self, empty_state):
        state = advance(empty_state, 0.9, 0.005, is_null=True)
        assert realized_fdp(state) == 0.0

    def test_half_false(self, empty_state):
        state = advance(empty_state, 0.001, 0.005, is_null=True)
        state = advance(state, 0.001, 0.005, is_null=False)
        assert realized_fdp(state) == 0.5

    def test_all_false(self, empty_state):
        state = empty_state
        for _ in range(4):
            state = advance(state, 0.001, 0.005, is_null=True)
        assert realized_fdp(state) == 1.0

    def test_needs_ground_truth(self, empty_state):
        state = advance(empty_state, 0.001, 0.005)
        with pytest.raises(EstimatorApplicabilityError):
            realized_fdp(state)


class TestStreamMetrics:
    def test_estimate_dominates_null_fraction(self, config, mixed_stream, rng):
        is_null = rng.random(len(mixed_stream)) < 0.7
        state = run_stream(build_procedure('lord', config), mixed_stream, is_null=is_null).state
        for t in range(state.t + 1):
            assert fdp_hat_0(state, t) >= alpha_fraction_bound(state, t)

    def test_metrics_fields(self, empty_state):
        state = advance(empty_state, 0.001, 0.005, lmbda=0.5, is_null=False)
        state = advance(state, 0.9, 0.005, lmbda=0.5, is_null=False)
        metrics = stream_metrics(state)
        assert metrics.t == 2
        assert metrics.rejections == 1
        assert metrics.true_discoveries == 1
        assert metrics.power == 0.5
        assert metrics.fdp == 0.0
        assert metrics.fdp_hat_lambda == pytest.approx(0.01)
        assert metrics.rejections == metrics.true_discoveries + metrics.false_discoveries

    def test_optional_fields(self, empty_state):
        metrics = stream_metrics(advance(empty_state, 0.5, 0.005))
        assert metrics.fdp_hat_lambda is None
        assert metrics.fdp is None
        assert metrics.power == 0.0


class TestAggregate:
    def test_zero_variance(self):
        summary = aggregate_fdr([_metrics(0.0), _metrics(0.0)])
        assert summary.fdr == 0.0
        assert summary.mcse == 0.0

    def test_unbiased_variance(self):
        summary = aggregate_fdr([_metrics(0.0), _metrics(1.0)])
        assert summary.fdr == 0.5
        assert summary.mcse == pytest.approx(math.sqrt(0.5 / 2))

    def test_mfdr_is_ratio_of_means(self):
        summary = aggregate_fdr([_metrics(0.5, rejections=2, false_discoveries=1),
                                 _metrics(0.0, rejections=1, false_discoveries=0)])
        assert summary.mfdr == pytest.approx(1 / 3)
        assert summary.mean_rejections == 1.5

    def test_fdr_equals_mfdr_with_constant_denominators(self):
        runs = [_metrics(0.5, rejections=2, false_discoveries=1)] * 3
        summary = aggregate_fdr(runs)
        assert summary.fdr == pytest.approx(summary.mfdr)

    def test_needs_two_runs(self):
        with pytest.raises(InsufficientDataError):
            aggregate_fdr([_metrics(0.0)])

    def test_same_t(self):
        with pytest.raises(ParameterDomainError):
            aggregate_fdr([_metrics(0.0, t=5), _metrics(0.0, t=6)])

    def test_needs_realized_fdp(self):
        with pytest.raises(EstimatorApplicabilityError):
            aggregate_fdr([_metrics(None), _metrics(0.0)])
