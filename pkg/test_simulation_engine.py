"""
Tests for stream generation, batch schedules and the scenario grid
"""
import math

import numpy as np
import pandas as pd
import pytest
from scipy.special import ndtri
from scipy.stats import kstest

from procedure_engine import StoppingRule, build_procedure, run_stream
from simulation_engine import (
    RESULT_COLUMNS,
    ProcedureSpec,
    ScenarioConfig,
    batch_labels,
    batch_schedule,
    desk_grid,
    full_grid,
    generate_stream,
    iteration_seed,
    normal_cdf,
    run_grid,
    super_uniformity_check,
)
from testing_state import ConfigurationError, UnsupportedCovarianceError


class TestNormalCdf:
    def test_reference_values(self):
        assert normal_cdf(0.0) == 0.5
        assert normal_cdf(-3.0) == pytest.approx(0.0013498980316300946, abs=1e-15)
        assert normal_cdf(1.96) == pytest.approx(0.9750021048517795, abs=1e-15)

    def test_against_erfc(self):
        for z in np.linspace(-8.0, 8.0, 10001):
            assert abs(normal_cdf(z) - 0.5 * math.erfc(-z / math.sqrt(2.0))) <= 1e-10

    def test_symmetry_and_monotonicity(self):
        z = np.linspace(-8.0, 8.0, 1001)
        values = normal_cdf(z)
        assert np.all(np.abs(values + normal_cdf(-z) - 1.0) <= 1e-14)
        assert np.all(np.diff(values) >= 0.0)


class TestBatchSchedule:
    def test_partial_trailing_block(self):
        schedule = batch_schedule(5, 2)
        assert schedule.spec_times == (0, 0, 2, 2, 4)
        assert schedule.group_sizes == {0: 2, 2: 2, 4: 1}

    def test_online_setting(self):
        assert batch_schedule(6, 1).spec_times == tuple(range(6))

    def test_alpha_spending_setting(self):
        schedule = batch_schedule(8, 8)
        assert schedule.spec_times == (0,) * 8
        assert schedule.group_size(0) == 8

    def test_labels(self):
        assert batch_labels(5, 2).tolist() == [1, 1, 2, 2, 3]

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            batch_schedule(0, 1)


class TestScenarioConfig:
    @pytest.mark.parametrize('rho', [-0.1, 1.0, 1.5])
    def test_covariance_domain(self, rho):
        with pytest.raises(UnsupportedCovarianceError):
            ScenarioConfig(rho=rho)

    def test_spend_fraction_follows_batch_size(self):
        assert ScenarioConfig(n_batch=10).default_spend_fraction == pytest.approx(0.1)
        assert ScenarioConfig(n_batch=200).default_spend_fraction == 1.0
        assert ScenarioConfig(n_batch=10, spend_fraction=0.3).default_spend_fraction == 0.3

    def test_null_assignment_names(self):
        with pytest.raises(ConfigurationError):
            ScenarioConfig(null_assignment='half')

    def test_grids(self):
        assert len(desk_grid()) == 12
        assert len(full_grid()) == 80
        assert all(s.iterations == 1000 for s in full_grid())


class TestGenerateStream:
    def test_independent_when_rho_zero(self):
        scenario = ScenarioConfig(t_max=200000, pi1=0.0, rho=0.0, n_batch=2)
        z = -ndtri(generate_stream(scenario, 1).p_values)
        assert abs(np.corrcoef(z[0::2], z[1::2])[0, 1]) < 0.01

    def test_block_correlation(self):
        scenario = ScenarioConfig(t_max=1000000, pi1=0.0, rho=0.6, n_batch=10)
        z = -ndtri(generate_stream(scenario, 2).p_values)
        within = np.corrcoef(z[0::10], z[1::10])[0, 1]
        across = np.corrcoef(z[9:-1:10], z[10::10])[0, 1]
        assert within == pytest.approx(0.6, abs=0.02)
        assert across == pytest.approx(0.0, abs=0.02)

    def test_null_p_values_are_uniform(self):
        scenario = ScenarioConfig(t_max=100000, pi1=0.0, rho=0.3, n_batch=1)
        p = generate_stream(scenario, 3).p_values
        result = kstest(p, 'uniform')
        assert result.statistic < 1.63 / math.sqrt(len(p))
        assert result.pvalue > 0.001

    def test_signals_have_small_p_values(self):
        scenario = ScenarioConfig(t_max=5000, pi1=0.5, rho=0.0)
        stream = generate_stream(scenario, 4)
        assert np.median(stream.p_values[~stream.is_null]) < np.median(stream.p_values[stream.is_null])

    def test_exact_assignment(self):
        scenario = ScenarioConfig(t_max=500, pi1=0.1, null_assignment='exact')
        assert int((~generate_stream(scenario, 5).is_null).sum()) == 50

    def test_seeded(self):
        scenario = ScenarioConfig(t_max=100)
        first = generate_stream(scenario, 42)
        second = generate_stream(scenario, 42)
        assert np.array_equal(first.p_values, second.p_values)
        assert np.array_equal(first.is_null, second.is_null)


def test_iteration_seeds():
    assert iteration_seed(0, 1, 2) == iteration_seed(0, 1, 2)
    seeds = {iteration_seed(0, k, j) for k in range(5) for j in range(50)}
    assert len(seeds) == 250
    assert all(0 <= seed < 2 ** 64 for seed in seeds)


class TestRunGrid:
    def _small(self, **kwargs):
        return [ScenarioConfig(t_max=100, pi1=pi1, rho=0.3, n_batch=5, iterations=10, master_seed=7, **kwargs)
                for pi1 in (0.0, 0.3)]

    def test_columns_and_rows(self):
        results = run_grid(self._small(), verbose=False)
        assert list(results.columns) == RESULT_COLUMNS
        assert len(results) == 4
        assert set(results['procedure']) == {'planned-lord', 'planned-saffron'}

    def test_no_signal_means_zero_power(self):
        results = run_grid(self._small(), verbose=False)
        assert (results[results['pi1'] == 0.0]['power'] == 0.0).all()

    def test_bit_identical_and_worker_independent(self):
        serial = run_grid(self._small(), verbose=False)
        again = run_grid(self._small(), verbose=False)
        pooled = run_grid(self._small(), workers=3, verbose=False)
        pd.testing.assert_frame_equal(serial, again, check_exact=True)
        pd.testing.assert_frame_equal(serial, pooled, check_exact=True)

    def test_two_iterations(self):
        scenario = ScenarioConfig(t_max=50, pi1=0.2, iterations=2)
        results = run_grid([scenario], [ProcedureSpec('saffron')], verbose=False)
        assert np.isfinite(results['mcse']).all()

    def test_stopping_label(self):
        spec = ProcedureSpec('planned-saffron', stopping=StoppingRule(max_rejections=5))
        results = run_grid(self._small(), [spec], verbose=False)
        assert set(results['procedure']) == {'planned-saffron[max-r=5]'}

    def test_power_grows_with_signal(self):
        weak = run_grid(self._small(mu_alt=2.0), verbose=False)
        strong = run_grid(self._small(mu_alt=4.0), verbose=False)
        assert (strong['power'].to_numpy() >= weak['power'].to_numpy()).all()

    def test_progress_lines(self, capsys):
        run_grid(self._small(), verbose=True)
        out = capsys.readouterr().out
        assert '[SIMULATION]' in out
        assert '[OK] scenario 2/2' in out


def test_super_uniformity():
    scenario = ScenarioConfig(t_max=500, pi1=0.1, rho=0.6, n_batch=10)
    spec = ProcedureSpec('planned-lord')
    procedure = build_procedure(spec.name, spec.config_for(scenario))
    labels = batch_labels(scenario.t_max, scenario.n_batch)
    states = []
    for j in range(100):
        stream = generate_stream(scenario, iteration_seed(0, 0, j))
        states.append(run_stream(procedure, stream.p_values, stream.is_null, labels).state)
    check = super_uniformity_check(states)
    assert check.expected > 0
    assert check.passed


@pytest.mark.slow
def test_desk_grid_controls_fdr():
    results = run_grid(desk_grid(master_seed=0), verbose=False)
    assert (results['fdr'] <= 0.05 + 2 * results['mcse']).all()


@pytest.mark.slow
def test_dense_signal_cell_controls_fdr():
    scenario = ScenarioConfig(t_max=500, pi1=0.5, rho=0.3, n_batch=10, iterations=200)
    results = run_grid([scenario], [ProcedureSpec('planned-lord')], verbose=False)
    assert results.loc[0, 'fdr'] <= 0.05 + 2 * results.loc[0, 'mcse']


@pytest.mark.slow
def test_desk_grid_fdr_shape():
    results = run_grid(desk_grid(master_seed=0), verbose=False)
    signal = results[results['pi1'] >= 0.1]
    for _, cell in signal.groupby(['procedure', 'n_batch', 'rho']):
        sparse = cell[cell['pi1'] == 0.1].iloc[0]
        dense = cell[cell['pi1'] == 0.5].iloc[0]
        slack = 3 * math.hypot(sparse['mcse'], dense['mcse'])
        # rises toward the level, then stays below it
        assert dense['fdr'] >= sparse['fdr'] - slack
        assert (cell['fdr'] <= 0.05 + 2 * cell['mcse']).all()


@pytest.mark.slow
@pytest.mark.parametrize('name', ['saffron', 'planned-saffron'])
def test_rejection_cap_keeps_fdr_control(name):
    scenario = ScenarioConfig(t_max=500, pi1=0.3, rho=0.3, n_batch=10, iterations=200)
    spec = ProcedureSpec(name, stopping=StoppingRule(max_rejections=5))
    results = run_grid([scenario], [spec], verbose=False)
    assert results.loc[0, 'procedure'] == f'{name}[max-r=5]'
    assert results.loc[0, 'fdr'] <= 0.05 + 2 * results.loc[0, 'mcse']
