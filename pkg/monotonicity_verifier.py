"""
Monotonicity and Constraint Verifier
Perturbation audits of the "smaller p-values never cost rejections" property,
FDP-estimate constraint audits and incremental-versus-direct threshold checks
"""
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fdp_estimators import fdp_hat_0, fdp_hat_lambda
from procedure_engine import (
    SAFFRON_FAMILY,
    ProcedureConfig,
    SequentialProcedure,
    build_procedure,
    direct_thresholds,
    run_stream,
    without_stopping,
)
from simulation_engine import normal_cdf
from testing_state import (
    WEALTH_TOLERANCE,
    ConfigurationError,
    EstimatorApplicabilityError,
    ProcedureState,
    PValue,
    ScheduleSpec,
)

SIGNAL_MEAN = 3.0


@dataclass(frozen=True)
class PerturbationTrial:
    """A stream, a coordinatewise smaller copy and the rejections of each"""
    trial: int
    base_stream: Tuple[PValue, ...]
    perturbed_stream: Tuple[PValue, ...]
    rejections_base: int
    rejections_perturbed: int

    @property
    def violated(self) -> bool:
        return self.rejections_perturbed < self.rejections_base

    @property
    def perturbed_indices(self) -> Tuple[int, ...]:
        """1-based indices where the copy differs from the stream"""
        return tuple(
            i for i, (base, perturbed) in enumerate(zip(self.base_stream, self.perturbed_stream), start=1)
            if perturbed.value != base.value
        )


@dataclass(frozen=True)
class Condition1Report:
    procedure: str
    trials: int
    length: int
    seed: int
    violations: int
    counterexamples: Tuple[PerturbationTrial, ...]  # minimized, sorted by trial

    @property
    def passed(self) -> bool:
        return self.violations == 0


def draw_stream(rng: np.random.Generator, length: int, signal_fraction: float = 0.0) -> np.ndarray:
    """Uniform p-values, with a fraction replaced by Phi(-Z), Z ~ N(3, 1)"""
    p = rng.random(length)
    if signal_fraction > 0.0:
        signal = rng.random(length) < signal_fraction
        z = rng.normal(SIGNAL_MEAN, 1.0, length)
        p = np.where(signal, normal_cdf(-z), p)
    return p


def _rejections(procedure: SequentialProcedure, stream: Sequence[float]) -> int:
    return run_stream(procedure, stream).state.rejection_count


def _minimize(procedure: SequentialProcedure, trial: PerturbationTrial) -> PerturbationTrial:
    """Restore perturbed coordinates one at a time while the violation persists"""
    base = [p.value for p in trial.base_stream]
    current = [p.value for p in trial.perturbed_stream]
    rejections = trial.rejections_perturbed
    for i in trial.perturbed_indices:
        candidate = list(current)
        candidate[i - 1] = base[i - 1]
        count = _rejections(procedure, candidate)
        if count < trial.rejections_base:
            current, rejections = candidate, count
    return replace(
        trial,
        perturbed_stream=tuple(PValue(p) for p in current),
        rejections_perturbed=rejections,
    )


def _run_trial(procedure: SequentialProcedure, trial: int, seed: np.random.SeedSequence,
               length: int, signal_fraction: float, minimize: bool) -> PerturbationTrial:
    rng = np.random.default_rng(seed)
    base = draw_stream(rng, length, signal_fraction)
    subset = rng.random(length) < 0.5
    if not subset.any():
        subset[rng.integers(length)] = True
    perturbed = np.where(subset, base * rng.random(length), base)

    result = PerturbationTrial(
        trial=trial,
        base_stream=tuple(PValue(p) for p in base),
        perturbed_stream=tuple(PValue(p) for p in perturbed),
        rejections_base=_rejections(procedure, base),
        rejections_perturbed=_rejections(procedure, perturbed),
    )
    if result.violated and minimize:
        return _minimize(procedure, result)
    return result


def check_condition_1(procedure: str,
                      config: Optional[ProcedureConfig],
                      trials: int,
                      length: int,
                      seed: int,
                      signal_fraction: float = 0.0,
                      workers: int = 1,
                      minimize: bool = True,
                      verbose: bool = False) -> Condition1Report:
    """
    Perturbation audit: shrinking p-values must never reduce total rejections.

    Each trial draws a stream, multiplies a random nonempty subset of its
    coordinates by independent uniform(0, 1) factors and runs both streams
    through the full procedure, stopping rules included.

    Args:
        procedure: Registered procedure name
        config: Procedure parameters (None for defaults)
        trials: Number of independent trials
        length: Stream length
        seed: Master seed; trial seeds are spawned from it
        signal_fraction: Fraction of p-values drawn from the alternative
        workers: Worker processes; the procedure and its caps must pickle
        minimize: Shrink counterexamples before reporting
        verbose: Print progress lines

    Returns:
        Condition1Report with every violating trial
    """
    if trials < 1 or length < 1:
        raise ConfigurationError("trials and length must be positive")
    runner = build_procedure(procedure, config)
    seeds = np.random.SeedSequence(seed).spawn(trials)
    results: List[PerturbationTrial] = []

    if verbose:
        print(f"[VERIFY] {runner.label}: {trials} perturbation trials of length {length}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            future_to_trial = {
                executor.submit(_run_trial, runner, k, seeds[k], length, signal_fraction, minimize): k
                for k in range(trials)
            }
            for future in as_completed(future_to_trial):
                results.append(future.result())
    else:
        results = [_run_trial(runner, k, seeds[k], length, signal_fraction, minimize) for k in range(trials)]

    counterexamples = tuple(sorted((r for r in results if r.violated), key=lambda r: r.trial))
    return Condition1Report(
        procedure=runner.label,
        trials=trials,
        length=length,
        seed=seed,
        violations=len(counterexamples),
        counterexamples=counterexamples,
    )


def audit_constraints(state: ProcedureState, family: str) -> bool:
    """
    True iff the family's FDP estimate stays at or below the level at every t.

    FDP_hat_0 for the LORD family, FDP_hat_lambda for the SAFFRON family.
    """
    estimator = fdp_hat_lambda if family == SAFFRON_FAMILY else fdp_hat_0
    bound = state.level + WEALTH_TOLERANCE
    try:
        return all(estimator(state, t) <= bound for t in range(state.t + 1))
    except EstimatorApplicabilityError:
        return False


def random_schedule(rng: np.random.Generator, length: int) -> ScheduleSpec:
    """Arbitrary specification times 0 <= s_i < i, not necessarily monotone"""
    return ScheduleSpec.from_spec_times([int(rng.integers(0, i)) for i in range(1, length + 1)])


def oracle_crosscheck(procedure: str,
                      config: Optional[ProcedureConfig],
                      streams: int,
                      length: int,
                      seed: int,
                      random_schedules: bool = False,
                      signal_fraction: float = 0.2) -> float:
    """
    Largest |alpha_t incremental - alpha_t direct| over all streams and stages.

    Stopping is removed; the direct evaluation covers the unwrapped rules.
    """
    config = without_stopping(config or ProcedureConfig())
    rng = np.random.default_rng(seed)
    discrepancy = 0.0
    for _ in range(streams):
        p = draw_stream(rng, length, signal_fraction)
        stream_config = config
        if random_schedules and procedure.startswith('planned-'):
            stream_config = replace(config, schedule=random_schedule(rng, length))
        fast = run_stream(build_procedure(procedure, stream_config), p).thresholds
        direct = direct_thresholds(procedure, stream_config, p)
        discrepancy = max(discrepancy, max((abs(a - b) for a, b in zip(fast, direct)), default=0.0))
    return discrepancy


@dataclass(frozen=True)
class StoppingMonotonicityReport:
    trials: int
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_stopping_monotone(procedure: str,
                            config: ProcedureConfig,
                            trials: int,
                            length: int,
                            seed: int,
                            signal_fraction: float = 0.2) -> StoppingMonotonicityReport:
    """
    Adaptive caps must not decrease when p-values shrink.

    Runs the unwrapped rule on a stream and on a smaller copy and compares
    every adaptive cap on the two histories at each stage.
    """
    rule = config.stopping
    if rule is None or not rule.adaptive_caps:
        raise ConfigurationError("check_stopping_monotone needs a rule with adaptive caps")
    runner = build_procedure(procedure, without_stopping(config))
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(trials):
        base = draw_stream(rng, length, signal_fraction)
        perturbed = base * np.where(rng.random(length) < 0.5, rng.random(length), 1.0)
        state = run_stream(runner, base).state
        smaller = run_stream(runner, perturbed).state
        if any(
            cap(smaller.prefix(t)) < cap(state.prefix(t))
            for t in range(length + 1) for cap in rule.adaptive_caps
        ):
            violations += 1
    return StoppingMonotonicityReport(trials=trials, violations=violations)
