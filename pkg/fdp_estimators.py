"""
FDP Estimators and Error Metrics
Empirical FDP estimates tracked by the threshold rules, realized FDP on
simulated streams and Monte Carlo aggregation across replications
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from testing_state import (
    EstimatorApplicabilityError,
    InsufficientDataError,
    ParameterDomainError,
    ProcedureState,
    effective_denominator,
)


@dataclass(frozen=True)
class StreamMetrics:
    """Estimates and realized metrics of one stream at time t"""
    t: int
    fdp_hat_0: float
    fdp_hat_lambda: Optional[float]  # None when records carry no lambda
    fdp: Optional[float]  # None without ground truth
    rejections: int
    true_discoveries: int
    false_discoveries: int
    false_nulls: int
    power: float  # 0 when there are no false nulls


@dataclass(frozen=True)
class FdrSummary:
    """Monte Carlo summary over replications at a fixed t"""
    fdr: float
    mcse: float
    mfdr: float
    power: float
    mean_rejections: float
    runs: int


def _view(state: ProcedureState, t: Optional[int]) -> ProcedureState:
    if t is None:
        return state
    if not 0 <= t <= state.t:
        raise ParameterDomainError(f"t={t} outside 0..{state.t}")
    return state.prefix(t)


def fdp_hat_0(state: ProcedureState, t: Optional[int] = None) -> float:
    """sum_{i<=t} alpha_i / (1 v |R_t|)"""
    view = _view(state, t)
    return view.spent_sum / effective_denominator(view)


def fdp_hat_lambda(state: ProcedureState, t: Optional[int] = None) -> float:
    """sum_{i<=t} alpha_i 1(P_i > lambda_i) / (1 - lambda_i) / (1 v |R_t|)"""
    view = _view(state, t)
    if view.missing_lambda:
        raise EstimatorApplicabilityError(
            f"{view.missing_lambda} of the first {view.t} records carry no lambda"
        )
    return view.lambda_numerator / effective_denominator(view)


def realized_fdp(state: ProcedureState, t: Optional[int] = None) -> float:
    """|H0 and R_t| / (1 v |R_t|)"""
    view = _view(state, t)
    if view.missing_truth:
        raise EstimatorApplicabilityError("realized FDP needs the null status of every record")
    return view.false_discoveries / effective_denominator(view)


def alpha_fraction_bound(state: ProcedureState, t: Optional[int] = None) -> float:
    """sum over true nulls of alpha_i / (1 v |R_t|); FDP_hat_0 never falls below it"""
    view = _view(state, t)
    if view.missing_truth:
        raise EstimatorApplicabilityError("the null-only bound needs the null status of every record")
    return view.null_spent_sum / effective_denominator(view)


def stream_metrics(state: ProcedureState, t: Optional[int] = None) -> StreamMetrics:
    view = _view(state, t)
    has_truth = not view.missing_truth
    return StreamMetrics(
        t=view.t,
        fdp_hat_0=fdp_hat_0(view),
        fdp_hat_lambda=None if view.missing_lambda else fdp_hat_lambda(view),
        fdp=realized_fdp(view) if has_truth else None,
        rejections=view.rejection_count,
        true_discoveries=view.true_discoveries,
        false_discoveries=view.false_discoveries,
        false_nulls=view.false_nulls,
        power=view.true_discoveries / view.false_nulls if view.false_nulls else 0.0,
    )


def aggregate_fdr(runs: Sequence[StreamMetrics]) -> FdrSummary:
    """
    FDR, its Monte Carlo standard error and mFDR across replications.

    Args:
        runs: Metrics of independent replications, all at the same t

    Returns:
        FdrSummary with the mean FDP, sqrt(Var(FDP) / N) using the unbiased
        variance, and mean(false discoveries) / mean(1 v |R|)
    """
    if len(runs) < 2:
        raise InsufficientDataError(f"need at least 2 replications, got {len(runs)}")
    if len({run.t for run in runs}) != 1:
        raise ParameterDomainError("replications must be measured at the same t")
    if any(run.fdp is None for run in runs):
        raise EstimatorApplicabilityError("FDR needs the realized FDP of every replication")

    fdp = np.array([run.fdp for run in runs], dtype=float)
    false_discoveries = np.array([run.false_discoveries for run in runs], dtype=float)
    denominators = np.array([max(1, run.rejections) for run in runs], dtype=float)
    power = np.array([run.power for run in runs], dtype=float)
    rejections = np.array([run.rejections for run in runs], dtype=float)

    return FdrSummary(
        fdr=float(fdp.mean()),
        mcse=math.sqrt(float(fdp.var(ddof=1)) / len(fdp)),
        mfdr=float(false_discoveries.mean() / denominators.mean()),
        power=float(power.mean()),
        mean_rejections=float(rejections.mean()),
        runs=len(runs),
    )
