"""
Monte Carlo Simulation Engine
Block-correlated Gaussian test statistics, one-sided p-values, batch schedules
and the scenario grid used to measure FDR under positive dependence
"""
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import ndtr

from fdp_estimators import StreamMetrics, aggregate_fdr, stream_metrics
from procedure_engine import ProcedureConfig, StoppingRule, build_procedure, run_stream
from testing_state import ConfigurationError, ProcedureState, ScheduleSpec, UnsupportedCovarianceError

NULL_ASSIGNMENTS = ('bernoulli', 'exact')
RESULT_COLUMNS = ['procedure', 'n_batch', 'rho', 'pi1', 'iterations', 'fdr', 'mcse', 'mfdr', 'power']

DESK_N_BATCH = (1, 10)
DESK_RHO = (0.3, 0.6)
DESK_PI1 = (0.0, 0.1, 0.5)
FULL_N_BATCH = (1, 5, 10, 50)
FULL_RHO = (0.3, 0.6)
FULL_PI1 = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid"""
    t_max: int = 500
    pi1: float = 0.1  # proportion of false nulls
    rho: float = 0.3  # within-block correlation
    n_batch: int = 1  # block size
    mu_alt: float = 3.0
    iterations: int = 200
    master_seed: int = 0
    level: float = 0.05
    null_assignment: str = 'bernoulli'
    spend_fraction: Optional[float] = None  # defaults to min(1, 0.01 * n_batch)

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise UnsupportedCovarianceError(f"rho must lie in [0, 1), got {self.rho!r}")
        if self.t_max < 1 or self.n_batch < 1 or self.iterations < 1:
            raise ConfigurationError("t_max, n_batch and iterations must be positive")
        if not (0.0 <= self.pi1 <= 1.0):
            raise ConfigurationError(f"pi1 must lie in [0, 1], got {self.pi1!r}")
        if not (0.0 < self.level <= 1.0):
            raise ConfigurationError(f"level must lie in (0, 1], got {self.level!r}")
        if self.null_assignment not in NULL_ASSIGNMENTS:
            raise ConfigurationError(f"null assignment must be one of {NULL_ASSIGNMENTS}")
        if self.spend_fraction is not None and not (0.0 <= self.spend_fraction <= 1.0):
            raise ConfigurationError(f"spend fraction must lie in [0, 1], got {self.spend_fraction!r}")

    @property
    def default_spend_fraction(self) -> float:
        if self.spend_fraction is not None:
            return self.spend_fraction
        return min(1.0, 0.01 * self.n_batch)


class GeneratedStream(NamedTuple):
    p_values: np.ndarray
    is_null: np.ndarray


def normal_cdf(z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Standard normal CDF"""
    result = ndtr(z)
    return float(result) if np.ndim(result) == 0 else result


def iteration_seed(master_seed: int, scenario_index: int, iteration: int) -> int:
    """64-bit seed of one replication, independent of execution order"""
    sequence = np.random.SeedSequence([master_seed, scenario_index, iteration])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def batch_labels(t_max: int, n_batch: int) -> np.ndarray:
    """b_i = ceil(i / n_batch)"""
    return (np.arange(t_max) // n_batch) + 1


def batch_schedule(t_max: int, n_batch: int) -> ScheduleSpec:
    """s_i = (b_i - 1) * n_batch: every threshold uses only earlier batches"""
    if t_max < 1 or n_batch < 1:
        raise ConfigurationError("t_max and n_batch must be positive")
    spec_times = (batch_labels(t_max, n_batch) - 1) * n_batch
    return ScheduleSpec.from_spec_times(spec_times.tolist())


def generate_stream(scenario: ScenarioConfig, seed: int) -> GeneratedStream:
    """
    Draw one stream of one-sided p-values P_i = Phi(-Z_i).

    Z_i = mu_i + sqrt(rho) G_b + sqrt(1 - rho) e_i gives unit variances and
    correlation rho inside each block of n_batch consecutive indices.
    """
    rng = np.random.default_rng(seed)
    n = scenario.t_max
    if scenario.null_assignment == 'bernoulli':
        is_null = rng.random(n) >= scenario.pi1
    else:
        is_null = np.ones(n, dtype=bool)
        alternatives = rng.choice(n, size=int(round(scenario.pi1 * n)), replace=False)
        is_null[alternatives] = False
    mu = np.where(is_null, 0.0, scenario.mu_alt)

    labels = batch_labels(n, scenario.n_batch)
    shared = rng.standard_normal(int(labels[-1]))
    noise = rng.standard_normal(n)
    z = mu + math.sqrt(scenario.rho) * shared[labels - 1] + math.sqrt(1.0 - scenario.rho) * noise
    return GeneratedStream(p_values=ndtr(-z), is_null=is_null)


@dataclass(frozen=True)
class ProcedureSpec:
    """A procedure as it appears in the grid; the cell supplies pi and the schedule"""
    name: str
    lmbda: float = 0.5
    stopping: Optional[StoppingRule] = None
    spend_fraction: Optional[float] = None
    penalize_clamped: bool = False
    label: Optional[str] = None

    def config_for(self, scenario: ScenarioConfig) -> ProcedureConfig:
        spend = self.spend_fraction
        if spend is None:
            spend = scenario.default_spend_fraction
        return ProcedureConfig(
            level=scenario.level,
            spend_fraction=spend,
            lmbda=self.lmbda,
            schedule=batch_schedule(scenario.t_max, scenario.n_batch),
            stopping=self.stopping,
            penalize_clamped=self.penalize_clamped,
        )

    @property
    def display_name(self) -> str:
        if self.label:
            return self.label
        if self.stopping is None:
            return self.name
        return f"{self.name}[{self.stopping.describe()}]"


DEFAULT_PROCEDURES = (ProcedureSpec('planned-lord'), ProcedureSpec('planned-saffron'))


def desk_grid(master_seed: int = 0, iterations: int = 200, t_max: int = 500, **overrides) -> List[ScenarioConfig]:
    """Reduced grid for quick checks"""
    return [
        ScenarioConfig(t_max=t_max, pi1=pi1, rho=rho, n_batch=n_batch,
                       iterations=iterations, master_seed=master_seed, **overrides)
        for n_batch in DESK_N_BATCH for rho in DESK_RHO for pi1 in DESK_PI1
    ]


def full_grid(master_seed: int = 0, iterations: int = 1000, t_max: int = 500, **overrides) -> List[ScenarioConfig]:
    """The complete batch-size x correlation x signal-proportion grid"""
    return [
        ScenarioConfig(t_max=t_max, pi1=pi1, rho=rho, n_batch=n_batch,
                       iterations=iterations, master_seed=master_seed, **overrides)
        for n_batch in FULL_N_BATCH for rho in FULL_RHO for pi1 in FULL_PI1
    ]


def _run_iteration(scenario: ScenarioConfig, scenario_index: int, iteration: int,
                   procedures, labels: np.ndarray) -> List[StreamMetrics]:
    stream = generate_stream(scenario, iteration_seed(scenario.master_seed, scenario_index, iteration))
    return [
        stream_metrics(run_stream(procedure, stream.p_values, stream.is_null, labels).state)
        for procedure in procedures
    ]


def _scenario_results(executor: Optional[ProcessPoolExecutor], scenario: ScenarioConfig, k: int,
                      runners, labels: np.ndarray) -> Dict[int, List[StreamMetrics]]:
    if executor is None:
        return {j: _run_iteration(scenario, k, j, runners, labels) for j in range(scenario.iterations)}
    future_to_iteration = {
        executor.submit(_run_iteration, scenario, k, j, runners, labels): j
        for j in range(scenario.iterations)
    }
    return {future_to_iteration[future]: future.result() for future in as_completed(future_to_iteration)}


def run_grid(scenarios: Sequence[ScenarioConfig],
             procedures: Sequence[ProcedureSpec] = DEFAULT_PROCEDURES,
             workers: int = 1,
             verbose: bool = True) -> pd.DataFrame:
    """
    Run every procedure on every scenario.

    All procedures of a cell see the same streams. Iterations fan out over
    `workers` processes and are reduced by (scenario, procedure, iteration),
    so the table does not depend on `workers` or on completion order.

    Returns:
        DataFrame with one row per (scenario, procedure) and RESULT_COLUMNS
    """
    rows = []
    started = time.time()
    if verbose:
        print("=" * 80)
        print(f"[SIMULATION] {len(scenarios)} scenarios x {len(procedures)} procedures, {workers} worker(s)")
        print("=" * 80)

    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k, scenario in enumerate(scenarios):
            runners = [build_procedure(spec.name, spec.config_for(scenario)) for spec in procedures]
            labels = batch_labels(scenario.t_max, scenario.n_batch)
            results = _scenario_results(executor, scenario, k, runners, labels)

            for position, spec in enumerate(procedures):
                summary = aggregate_fdr([results[j][position] for j in range(scenario.iterations)])
                rows.append({
                    'procedure': spec.display_name,
                    'n_batch': scenario.n_batch,
                    'rho': scenario.rho,
                    'pi1': scenario.pi1,
                    'iterations': scenario.iterations,
                    'fdr': summary.fdr,
                    'mcse': summary.mcse,
                    'mfdr': summary.mfdr,
                    'power': summary.power,
                })
            if verbose:
                print(f"  [OK] scenario {k + 1}/{len(scenarios)}: n_batch={scenario.n_batch} "
                      f"rho={scenario.rho} pi1={scenario.pi1}")
    finally:
        if executor is not None:
            executor.shutdown()

    if verbose:
        print(f"[TIMING] grid finished in {time.time() - started:.1f}s")
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


@dataclass(frozen=True)
class SuperUniformityCheck:
    """Null rejections against the sum of their thresholds"""
    observed: int
    expected: float
    standard_error: float

    @property
    def passed(self) -> bool:
        return self.observed <= self.expected + 3.0 * self.standard_error


def super_uniformity_check(states: Sequence[ProcedureState]) -> SuperUniformityCheck:
    """
    Compare the number of rejected true nulls with sum alpha_i over nulls.

    Each null p-value is uniform given the thresholds fixed before its batch,
    so null rejections behave like independent Bernoulli(alpha_i) draws.
    """
    alphas = np.array([
        record.alpha for state in states for record in state.records if record.is_null
    ], dtype=float)
    observed = sum(
        record.rejected for state in states for record in state.records if record.is_null
    )
    return SuperUniformityCheck(
        observed=int(observed),
        expected=float(alphas.sum()),
        standard_error=math.sqrt(float((alphas * (1.0 - alphas)).sum())),
    )

