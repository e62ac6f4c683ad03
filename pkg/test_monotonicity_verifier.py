"""
Tests for the perturbation, constraint and oracle audits
"""
import numpy as np
import pytest

from monotonicity_verifier import (
    audit_constraints,
    check_condition_1,
    check_stopping_monotone,
    draw_stream,
    oracle_crosscheck,
)
from procedure_engine import (
    LORD_FAMILY,
    SAFFRON_FAMILY,
    LinearCap,
    ProcedureConfig,
    StoppingRule,
    build_procedure,
    run_stream,
)
from simulation_engine import batch_schedule
from testing_state import ConfigurationError, advance


class TestConditionOne:
    @pytest.mark.parametrize('name', ['lord', 'saffron', 'alpha-investing', 'planned-lord', 'planned-saffron'])
    def test_procedures_are_monotone(self, name):
        report = check_condition_1(name, ProcedureConfig(), trials=150, length=60, seed=11, signal_fraction=0.2)
        assert report.passed
        assert report.trials == 150

    def test_batch_schedule_is_monotone(self):
        config = ProcedureConfig(spend_fraction=0.1, schedule=batch_schedule(100, 10))
        report = check_condition_1('planned-saffron', config, trials=100, length=100, seed=3, signal_fraction=0.2)
        assert report.violations == 0

    def test_rejection_cap_keeps_monotonicity(self):
        config = ProcedureConfig(stopping=StoppingRule(max_rejections=5))
        report = check_condition_1('saffron', config, trials=150, length=80, seed=5, signal_fraction=0.3)
        assert report.passed

    def test_adaptive_horizon_keeps_monotonicity(self):
        config = ProcedureConfig(stopping=StoppingRule(adaptive_max_stage=LinearCap(10, 5)))
        report = check_condition_1('lord', config, trials=150, length=80, seed=6, signal_fraction=0.3)
        assert report.passed

    def test_negative_control_is_caught(self):
        report = check_condition_1('nonmono-strawman', ProcedureConfig(), trials=300, length=50, seed=1,
                                   signal_fraction=0.2)
        assert report.violations > 0
        assert not report.passed
        for trial in report.counterexamples:
            assert trial.violated
            assert trial.perturbed_indices
            assert all(p.value <= b.value for p, b in zip(trial.perturbed_stream, trial.base_stream))

    def test_counterexamples_are_sorted(self):
        report = check_condition_1('nonmono-strawman', ProcedureConfig(), trials=300, length=50, seed=1,
                                   signal_fraction=0.2)
        trials = [trial.trial for trial in report.counterexamples]
        assert trials == sorted(trials)

    def test_deterministic_and_worker_independent(self):
        serial = check_condition_1('nonmono-strawman', ProcedureConfig(), trials=120, length=40, seed=9,
                                   signal_fraction=0.2)
        again = check_condition_1('nonmono-strawman', ProcedureConfig(), trials=120, length=40, seed=9,
                                  signal_fraction=0.2, workers=4)
        assert serial.violations == again.violations
        assert serial.counterexamples == again.counterexamples

    def test_worker_processes_receive_stopping_caps(self):
        config = ProcedureConfig(stopping=StoppingRule(max_rejections=3, adaptive_max_stage=LinearCap(10, 5)))
        serial = check_condition_1('lord', config, trials=40, length=60, seed=12, signal_fraction=0.3)
        pooled = check_condition_1('lord', config, trials=40, length=60, seed=12, signal_fraction=0.3, workers=2)
        assert pooled == serial
        assert pooled.procedure == 'lord[max-r=3,adaptive-stage=10+5r]'

    def test_invalid_budget(self):
        with pytest.raises(ConfigurationError):
            check_condition_1('lord', None, trials=0, length=10, seed=0)

    @pytest.mark.slow
    @pytest.mark.parametrize('name, stopping', [
        ('lord', None),
        ('saffron', None),
        ('alpha-investing', None),
        ('planned-lord', None),
        ('planned-saffron', None),
        ('saffron', StoppingRule(max_rejections=5)),
        ('planned-lord', StoppingRule(max_rejections=5, max_stage=80)),
        ('lord', StoppingRule(adaptive_max_stage=LinearCap(10, 5))),
        ('planned-saffron', StoppingRule(adaptive_max_rejections=LinearCap(3),
                                         adaptive_max_stage=LinearCap(20, 10))),
    ], ids=lambda value: value.describe() if isinstance(value, StoppingRule) else value)
    def test_full_budget(self, name, stopping):
        config = ProcedureConfig(stopping=stopping)
        report = check_condition_1(name, config, trials=1000, length=100, seed=0, signal_fraction=0.2)
        assert report.trials == 1000
        assert report.violations == 0

    @pytest.mark.slow
    def test_full_budget_negative_control(self):
        report = check_condition_1('nonmono-strawman', ProcedureConfig(), trials=1000, length=100, seed=0,
                                   signal_fraction=0.2, minimize=False)
        assert report.violations >= 1


class TestAuditConstraints:
    @pytest.mark.parametrize('name', ['lord', 'planned-lord'])
    def test_lord_family_runs_pass(self, name, config, mixed_stream):
        state = run_stream(build_procedure(name, config), mixed_stream).state
        assert audit_constraints(state, LORD_FAMILY)

    @pytest.mark.parametrize('name', ['saffron', 'alpha-investing', 'planned-saffron'])
    def test_saffron_family_runs_pass(self, name, config, mixed_stream):
        state = run_stream(build_procedure(name, config), mixed_stream).state
        assert audit_constraints(state, SAFFRON_FAMILY)

    def test_overspent_state_fails(self, empty_state):
        state = advance(empty_state, 0.9, 0.1)
        assert not audit_constraints(state, LORD_FAMILY)

    def test_missing_lambda_fails_saffron_audit(self, empty_state):
        state = advance(empty_state, 0.9, 0.001)
        assert not audit_constraints(state, SAFFRON_FAMILY)

    @pytest.mark.slow
    @pytest.mark.parametrize('name', ['lord', 'saffron', 'alpha-investing', 'planned-lord', 'planned-saffron'])
    def test_full_budget(self, name):
        procedure = build_procedure(name, ProcedureConfig())
        rng = np.random.default_rng(17)
        for k in range(1000):
            # alternate pure-null and signal-mixture streams
            run = run_stream(procedure, draw_stream(rng, 200, 0.2 if k % 2 else 0.0))
            assert run.min_wealth >= -1e-12
            assert audit_constraints(run.state, procedure.family)


class TestOracle:
    def test_lord(self):
        assert oracle_crosscheck('lord', ProcedureConfig(), streams=100, length=200, seed=2) <= 1e-12

    @pytest.mark.parametrize('name', ['saffron', 'alpha-investing'])
    def test_saffron_family(self, name):
        assert oracle_crosscheck(name, ProcedureConfig(), streams=30, length=150, seed=4) <= 1e-12

    @pytest.mark.parametrize('name', ['planned-lord', 'planned-saffron'])
    def test_random_non_monotone_schedules(self, name):
        discrepancy = oracle_crosscheck(name, ProcedureConfig(), streams=30, length=80, seed=8,
                                        random_schedules=True)
        assert discrepancy <= 1e-12

    def test_single_hypothesis_is_exact(self):
        assert oracle_crosscheck('planned-lord', ProcedureConfig(), streams=5, length=1, seed=0) == 0.0

    def test_stopping_is_ignored(self):
        config = ProcedureConfig(stopping=StoppingRule(max_rejections=1))
        assert oracle_crosscheck('saffron', config, streams=10, length=100, seed=1) <= 1e-12


class TestStoppingMonotone:
    def test_linear_caps_pass(self):
        config = ProcedureConfig(stopping=StoppingRule(adaptive_max_rejections=LinearCap(3, 1),
                                                       adaptive_max_stage=LinearCap(10, 5)))
        report = check_stopping_monotone('lord', config, trials=50, length=60, seed=0)
        assert report.passed

    def test_decreasing_cap_is_flagged(self):
        config = ProcedureConfig(stopping=StoppingRule(
            adaptive_max_stage=lambda history: max(1, 40 - 10 * history.rejection_count)))
        report = check_stopping_monotone('lord', config, trials=50, length=60, seed=0, signal_fraction=0.3)
        assert report.violations > 0

    def test_needs_adaptive_caps(self):
        with pytest.raises(ConfigurationError):
            check_stopping_monotone('lord', ProcedureConfig(), trials=1, length=10, seed=0)
