"""
Threshold Selection Engine for Online FDR Control
LORD and SAFFRON with geometric spending, alpha-investing, their planned (batch)
variants and monotone stopping wrappers behind one sequential-procedure interface
"""
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Type

from testing_state import (
    WEALTH_TOLERANCE,
    ConfigurationError,
    PlannedThreshold,
    ProcedureState,
    PValue,
    PValueLike,
    ScheduleError,
    ScheduleSpec,
    WealthInvariantError,
    advance,
    commit_plans,
)

DEFAULT_LAMBDA = 0.5
STRAWMAN_CUTOFF = 0.1

LORD_FAMILY = 'lord'
SAFFRON_FAMILY = 'saffron'


@dataclass(frozen=True)
class LinearCap:
    """Adaptive cap history -> base + per_rejection * |R|, nondecreasing in rejections"""
    base: int
    per_rejection: int = 0

    def __post_init__(self):
        if self.base < 1 or self.per_rejection < 0:
            raise ConfigurationError(
                f"cap needs base >= 1 and per_rejection >= 0, got {self.base}+{self.per_rejection}r"
            )

    def __call__(self, history: ProcedureState) -> int:
        return self.base + self.per_rejection * history.rejection_count

    def __str__(self) -> str:
        return f"{self.base}+{self.per_rejection}r"


HistoryCap = Callable[[ProcedureState], int]


def _check_cap(name: str, value: float):
    if value == math.inf:
        return
    if not (isinstance(value, int) and value >= 1):
        raise ConfigurationError(f"{name} must be a positive integer or inf, got {value!r}")


@dataclass(frozen=True)
class StoppingRule:
    """
    Monotone stopping wrapper.

    Testing stops at the first stage where the visible rejection count reaches
    a cap or the stage index exceeds a horizon. Adaptive caps are evaluated on
    the visible history and must not decrease when p-values shrink.
    """
    max_rejections: float = math.inf
    max_stage: float = math.inf
    adaptive_max_rejections: Optional[HistoryCap] = None
    adaptive_max_stage: Optional[HistoryCap] = None

    def __post_init__(self):
        _check_cap('max_rejections', self.max_rejections)
        _check_cap('max_stage', self.max_stage)

    @property
    def adaptive_caps(self) -> List[HistoryCap]:
        return [cap for cap in (self.adaptive_max_rejections, self.adaptive_max_stage) if cap is not None]

    def describe(self) -> str:
        parts = []
        if self.max_rejections != math.inf:
            parts.append(f"max-r={self.max_rejections}")
        if self.max_stage != math.inf:
            parts.append(f"max-stage={self.max_stage}")
        if self.adaptive_max_rejections is not None:
            parts.append(f"adaptive-r={self.adaptive_max_rejections}")
        if self.adaptive_max_stage is not None:
            parts.append(f"adaptive-stage={self.adaptive_max_stage}")
        return ','.join(parts) or 'none'


@dataclass(frozen=True)
class ProcedureConfig:
    """Tuning parameters shared by every threshold rule"""
    level: float = 0.05  # alpha
    spend_fraction: float = 0.1  # pi
    spend_schedule: Optional[Mapping[int, float]] = field(default=None, hash=False)  # s -> pi_s
    lmbda: float = DEFAULT_LAMBDA
    lambda_sequence: Optional[Sequence[float]] = None  # lambda_i for planned SAFFRON
    schedule: Optional[ScheduleSpec] = None
    stopping: Optional[StoppingRule] = None
    penalize_clamped: bool = False  # SAFFRON penalty with alpha_i instead of alpha_bar_i

    def __post_init__(self):
        if not (0.0 < self.level <= 1.0):
            raise ConfigurationError(f"level must lie in (0, 1], got {self.level!r}")
        if not (0.0 <= self.spend_fraction <= 1.0):
            raise ConfigurationError(f"spend fraction must lie in [0, 1], got {self.spend_fraction!r}")
        if not (0.0 < self.lmbda < 1.0):
            raise ConfigurationError(f"lambda must lie in (0, 1), got {self.lmbda!r}")
        if self.spend_schedule is not None:
            schedule = {int(s): float(pi) for s, pi in self.spend_schedule.items()}
            for s, pi in schedule.items():
                if s < 0 or not (0.0 <= pi <= 1.0):
                    raise ConfigurationError(f"spend schedule entry {s}:{pi} is out of range")
            object.__setattr__(self, 'spend_schedule', schedule)
        if self.lambda_sequence is not None:
            sequence = tuple(float(l) for l in self.lambda_sequence)
            for i, l in enumerate(sequence, start=1):
                if not (0.0 < l < 1.0):
                    raise ConfigurationError(f"lambda_{i} must lie in (0, 1), got {l!r}")
            object.__setattr__(self, 'lambda_sequence', sequence)

    def spend_at(self, s: int) -> float:
        """pi_s, falling back to the constant spend fraction"""
        if self.spend_schedule is not None:
            return self.spend_schedule.get(s, self.spend_fraction)
        return self.spend_fraction

    def lambda_at(self, i: int) -> float:
        if self.lambda_sequence is None:
            return self.lmbda
        if not 1 <= i <= len(self.lambda_sequence):
            raise ConfigurationError(f"no lambda specified for hypothesis {i}")
        return self.lambda_sequence[i - 1]

    def geometric_weight(self, i: int) -> float:
        """gamma_i = pi (1 - pi)^(i-1); the simplified rules are LORD/SAFFRON with these weights"""
        pi = self.spend_fraction
        return pi * (1.0 - pi) ** (i - 1)


def _nonnegative(wealth: float, label: str) -> float:
    if wealth < -WEALTH_TOLERANCE:
        raise WealthInvariantError(f"{label} wealth is negative: {wealth!r}")
    return max(wealth, 0.0)


def _check_stage(state_at_s: ProcedureState, schedule: ScheduleSpec, t: int) -> int:
    s = schedule.spec_time(t)
    if state_at_s.t != s:
        raise ScheduleError(f"threshold {t} is fixed at time {s} but the state holds {state_at_s.t} p-values")
    if state_at_s.plan_count != schedule.planned_before(s):
        raise ScheduleError(
            f"{schedule.planned_before(s)} thresholds must be fixed before time {s}, found {state_at_s.plan_count}"
        )
    return s


# =============================================================================
# Wealth terms
# =============================================================================

def lord_wealth(state: ProcedureState, config: ProcedureConfig) -> float:
    """alpha (1 v |R_{t-1}|) - sum_{i<t} alpha_i"""
    return config.level * max(1, state.rejection_count) - state.spent_sum


def saffron_wealth(state: ProcedureState, config: ProcedureConfig) -> float:
    penalty = state.lambda_numerator if config.penalize_clamped else state.penalty_sum
    return config.level * max(1, state.rejection_count) - penalty


def planned_lord_wealth(state_at_s: ProcedureState, config: ProcedureConfig) -> float:
    return config.level * max(1, state_at_s.rejection_count) - state_at_s.planned_alpha_sum


def planned_saffron_wealth(state_at_s: ProcedureState, config: ProcedureConfig) -> float:
    return config.level * max(1, state_at_s.rejection_count) - state_at_s.planned_penalty_sum


# =============================================================================
# Threshold rules
# =============================================================================

def lord_threshold(state: ProcedureState, config: ProcedureConfig) -> float:
    """
    alpha_t = (alpha (1 v |R_{t-1}|) - sum_{i<t} alpha_i) * pi

    Keeps FDP_hat_0(t) <= alpha after the step.
    """
    wealth = _nonnegative(lord_wealth(state, config), 'LORD')
    return wealth * config.spend_at(state.t)


def saffron_threshold(state: ProcedureState, config: ProcedureConfig) -> Tuple[float, float]:
    """
    Candidate alpha_bar_t and threshold alpha_t = min(lambda, alpha_bar_t).

    Keeps FDP_hat_lambda(t) <= alpha after the step.
    """
    wealth = _nonnegative(saffron_wealth(state, config), 'SAFFRON')
    alpha_bar = wealth * (1.0 - config.lmbda) * config.spend_at(state.t)
    return alpha_bar, min(config.lmbda, alpha_bar)


def alpha_investing_threshold(state: ProcedureState, config: ProcedureConfig) -> Tuple[float, float]:
    """
    SAFFRON update with lambda_t = alpha_bar_t.

    alpha_bar = W (1 - alpha_bar) pi is affine in alpha_bar, so with x = W pi
    the fixed point is x / (1 + x).
    """
    wealth = _nonnegative(saffron_wealth(state, config), 'alpha-investing')
    x = wealth * config.spend_at(state.t)
    alpha_bar = x / (1.0 + x)
    return alpha_bar, alpha_bar


def planned_lord_threshold(state_at_s: ProcedureState,
                           schedule: ScheduleSpec,
                           config: ProcedureConfig,
                           t: int) -> float:
    """
    alpha_t = (alpha (1 v |R_s|) - sum_{i: s_i < s} alpha_i) * pi_s / n_s, s = s_t

    Args:
        state_at_s: State holding exactly the first s_t p-values and every
            threshold fixed before s_t
        schedule: Specification times
        config: Procedure parameters
        t: Hypothesis index

    Returns:
        Threshold alpha_t
    """
    s = _check_stage(state_at_s, schedule, t)
    wealth = _nonnegative(planned_lord_wealth(state_at_s, config), 'planned LORD')
    return wealth * config.spend_at(s) / schedule.group_size(s)


def planned_saffron_threshold(state_at_s: ProcedureState,
                              schedule: ScheduleSpec,
                              config: ProcedureConfig,
                              t: int) -> Tuple[float, float]:
    """
    Planned SAFFRON candidate alpha_bar'_t and alpha_t = min(lambda_t, alpha_bar'_t).

    Every threshold fixed before s_t whose p-value is not yet observed is
    charged in full.
    """
    s = _check_stage(state_at_s, schedule, t)
    lmbda = config.lambda_at(t)
    wealth = _nonnegative(planned_saffron_wealth(state_at_s, config), 'planned SAFFRON')
    alpha_bar = wealth * (1.0 - lmbda) * config.spend_at(s) / schedule.group_size(s)
    return alpha_bar, min(lmbda, alpha_bar)


# =============================================================================
# Stopping
# =============================================================================

def stopping_allows(rule: StoppingRule,
                    state: ProcedureState,
                    t: int,
                    visible: Optional[int] = None) -> bool:
    """Whether every stopping indicator passes for hypothesis t given the visible history"""
    history = state if visible is None else state.prefix(visible)
    rejections = history.rejection_count
    if not (rejections < rule.max_rejections and t <= rule.max_stage):
        return False
    if rule.adaptive_max_rejections is not None and rejections >= rule.adaptive_max_rejections(history):
        return False
    if rule.adaptive_max_stage is not None and t > rule.adaptive_max_stage(history):
        return False
    return True


def apply_stopping(rule: Optional[StoppingRule],
                   state: ProcedureState,
                   base_threshold: float,
                   t: int,
                   visible: Optional[int] = None) -> float:
    """
    Zero the threshold once testing has stopped.

    `visible` is the number of p-values the threshold may depend on (s_t);
    defaults to every completed test.
    """
    if state.stopped:
        return 0.0
    if rule is None:
        return base_threshold
    return base_threshold if stopping_allows(rule, state, t, visible) else 0.0


# =============================================================================
# Procedures
# =============================================================================

class SequentialProcedure:
    """Base class for threshold rules driven by run_stream"""
    name = ''
    family = LORD_FAMILY

    def __init__(self, config: Optional[ProcedureConfig] = None):
        self.config = config or ProcedureConfig()

    def schedule_for(self, n: int) -> ScheduleSpec:
        return ScheduleSpec.online(n)

    def plan(self, state: ProcedureState, s: int, indices: Sequence[int],
             schedule: ScheduleSpec) -> List[PlannedThreshold]:
        """Thresholds for `indices`, all fixed at time s from the first s p-values"""
        raise NotImplementedError

    def gate(self, state: ProcedureState, plan: PlannedThreshold, t: int) -> bool:
        """Whether hypothesis t may use its planned threshold"""
        if state.stopped:
            return False
        rule = self.config.stopping
        if rule is None:
            return True
        # unit base: a zero planned threshold must not hide a failed indicator
        return apply_stopping(rule, state, 1.0, t, visible=plan.specified_at) > 0.0

    @property
    def label(self) -> str:
        if self.config.stopping is None:
            return self.name
        return f"{self.name}[{self.config.stopping.describe()}]"


class LordProcedure(SequentialProcedure):
    name = 'lord'

    def plan(self, state, s, indices, schedule):
        return [PlannedThreshold(
            index=t,
            alpha=lord_threshold(state, self.config),
            specified_at=s,
            wealth=lord_wealth(state, self.config),
        ) for t in indices]


class SaffronProcedure(SequentialProcedure):
    name = 'saffron'
    family = SAFFRON_FAMILY

    def plan(self, state, s, indices, schedule):
        alpha_bar, alpha = saffron_threshold(state, self.config)
        return [PlannedThreshold(
            index=t,
            alpha=alpha,
            specified_at=s,
            alpha_bar=alpha_bar,
            lmbda=self.config.lmbda,
            wealth=saffron_wealth(state, self.config),
        ) for t in indices]


class AlphaInvestingProcedure(SequentialProcedure):
    name = 'alpha-investing'
    family = SAFFRON_FAMILY

    def plan(self, state, s, indices, schedule):
        alpha_bar, alpha = alpha_investing_threshold(state, self.config)
        return [PlannedThreshold(
            index=t,
            alpha=alpha,
            specified_at=s,
            alpha_bar=alpha_bar,
            lmbda=alpha_bar,
            wealth=saffron_wealth(state, self.config),
        ) for t in indices]


class PlannedLordProcedure(SequentialProcedure):
    name = 'planned-lord'

    def schedule_for(self, n: int) -> ScheduleSpec:
        schedule = self.config.schedule or ScheduleSpec.online(n)
        if len(schedule) < n:
            raise ScheduleError(f"schedule covers {len(schedule)} hypotheses, stream has {n}")
        return schedule

    def plan(self, state, s, indices, schedule):
        wealth = planned_lord_wealth(state, self.config)
        return [PlannedThreshold(
            index=t,
            alpha=planned_lord_threshold(state, schedule, self.config, t),
            specified_at=s,
            wealth=wealth,
        ) for t in indices]


class PlannedSaffronProcedure(PlannedLordProcedure):
    name = 'planned-saffron'
    family = SAFFRON_FAMILY

    def schedule_for(self, n: int) -> ScheduleSpec:
        schedule = super().schedule_for(n)
        for i in range(1, n + 1):
            self.config.lambda_at(i)
        return schedule

    def plan(self, state, s, indices, schedule):
        wealth = planned_saffron_wealth(state, self.config)
        plans = []
        for t in indices:
            alpha_bar, alpha = planned_saffron_threshold(state, schedule, self.config, t)
            plans.append(PlannedThreshold(
                index=t,
                alpha=alpha,
                specified_at=s,
                alpha_bar=alpha_bar,
                lmbda=self.config.lambda_at(t),
                wealth=wealth,
            ))
        return plans


class StrawmanProcedure(LordProcedure):
    """
    Negative control: LORD thresholds zeroed for every stage after the first
    p-value at or below a screening cutoff. Smaller p-values move the stop
    earlier, so the rule is not monotone in the observed p-values.
    """
    name = 'nonmono-strawman'

    def __init__(self, config: Optional[ProcedureConfig] = None, cutoff: float = STRAWMAN_CUTOFF):
        super().__init__(config)
        self.cutoff = cutoff

    def gate(self, state, plan, t):
        if not super().gate(state, plan, t):
            return False
        # Earlier triggers already latched `stopped`; only the newest p-value matters
        return state.t == 0 or state.record(state.t).p.value > self.cutoff


PROCEDURES: Dict[str, Type[SequentialProcedure]] = {
    cls.name: cls for cls in (
        LordProcedure,
        SaffronProcedure,
        AlphaInvestingProcedure,
        PlannedLordProcedure,
        PlannedSaffronProcedure,
        StrawmanProcedure,
    )
}


def build_procedure(name: str, config: Optional[ProcedureConfig] = None) -> SequentialProcedure:
    try:
        return PROCEDURES[name](config)
    except KeyError:
        raise ConfigurationError(
            f"unknown procedure {name!r}; choose from {', '.join(PROCEDURES)}"
        ) from None


# =============================================================================
# Stream runner
# =============================================================================

@dataclass(frozen=True)
class StreamRun:
    """Outcome of one stream: final state and the wealth audit"""
    procedure: str
    state: ProcedureState
    min_wealth: float  # smallest bracketed wealth term seen while planning

    @property
    def thresholds(self) -> Tuple[float, ...]:
        """Planned threshold of every tested hypothesis, before stopping"""
        return tuple(self.state.plan_for(t).alpha for t in range(1, self.state.t + 1))


def run_stream(procedure: SequentialProcedure,
               p_values: Sequence[PValueLike],
               is_null: Optional[Sequence[bool]] = None,
               batches: Optional[Sequence[int]] = None) -> StreamRun:
    """
    Test a finite stream hypothesis by hypothesis.

    At every specification time s the thresholds with s_i = s are fixed from
    the state holding the first s p-values, then hypothesis s+1 is tested.
    """
    n = len(p_values)
    schedule = procedure.schedule_for(n)
    groups = schedule.groups()
    state = ProcedureState(level=procedure.config.level)
    min_wealth = math.inf

    for t in range(1, n + 1):
        due = groups.get(t - 1)
        if due:
            plans = procedure.plan(state, t - 1, due, schedule)
            min_wealth = min(min_wealth, min(plan.wealth for plan in plans))
            state = commit_plans(state, plans)

        plan = state.plan_for(t)
        allowed = procedure.gate(state, plan, t)
        alpha_bar = plan.alpha_bar
        if not allowed and alpha_bar is not None:
            alpha_bar = 0.0
        p = p_values[t - 1]
        state = advance(
            state,
            p if isinstance(p, PValue) else PValue(p),
            plan.alpha if allowed else 0.0,
            lmbda=plan.lmbda,
            alpha_bar=alpha_bar,
            specified_at=plan.specified_at,
            batch=None if batches is None else int(batches[t - 1]),
            is_null=None if is_null is None else bool(is_null[t - 1]),
            stop=not allowed,
        )

    return StreamRun(procedure=procedure.label, state=state, min_wealth=min_wealth)


# =============================================================================
# Direct evaluation of the threshold formulas
# =============================================================================

def _direct_online(name: str, config: ProcedureConfig, p: List[float]) -> List[float]:
    alphas: List[float] = []
    bars: List[float] = []
    lambdas: List[float] = []
    for t in range(1, len(p) + 1):
        done = range(t - 1)
        rejections = sum(1 for i in done if 0.0 < alphas[i] and p[i] <= alphas[i])
        base = config.level * max(1, rejections)
        pi = config.spend_at(t - 1)
        if name in ('lord', 'nonmono-strawman'):
            alpha = (base - sum(alphas[i] for i in done)) * pi
            bar, lmbda = alpha, None
        elif name == 'saffron':
            lmbda = config.lmbda
            weights = alphas if config.penalize_clamped else bars
            wealth = base - sum(weights[i] / (1.0 - lmbda) for i in done if p[i] > lmbda)
            bar = wealth * (1.0 - lmbda) * pi
            alpha = min(lmbda, bar)
        else:
            wealth = base - sum(bars[i] / (1.0 - lambdas[i]) for i in done if p[i] > lambdas[i])
            bar = wealth * pi / (1.0 + wealth * pi)
            alpha, lmbda = bar, bar
        alphas.append(alpha)
        bars.append(bar)
        lambdas.append(lmbda)
    return alphas


def _direct_planned(name: str, config: ProcedureConfig, p: List[float],
                    schedule: ScheduleSpec) -> List[float]:
    m = len(schedule)
    alphas: Dict[int, float] = {}
    for s in range(len(p)):
        members = [i for i in range(1, m + 1) if schedule.spec_times[i - 1] == s]
        if not members:
            continue
        earlier = [i for i in range(1, m + 1) if schedule.spec_times[i - 1] < s]
        rejections = sum(1 for i in range(1, s + 1) if 0.0 < alphas[i] and p[i - 1] <= alphas[i])
        base = config.level * max(1, rejections)
        share = config.spend_at(s) / len(members)
        for t in members:
            if name == 'planned-lord':
                alphas[t] = (base - sum(alphas[i] for i in earlier)) * share
            else:
                penalty = sum(
                    alphas[i] / (1.0 - config.lambda_at(i)) for i in earlier
                    if s < i or config.lambda_at(i) < p[i - 1]
                )
                lmbda = config.lambda_at(t)
                alphas[t] = min(lmbda, (base - penalty) * (1.0 - lmbda) * share)
    return [alphas[i] for i in range(1, len(p) + 1)]


def direct_thresholds(name: str,
                      config: ProcedureConfig,
                      p_values: Sequence[PValueLike],
                      schedule: Optional[ScheduleSpec] = None) -> List[float]:
    """
    Thresholds evaluated from the full sums at every step, ignoring stopping.

    Quadratic time; the reference for the incremental recurrences.
    """
    if name not in PROCEDURES:
        raise ConfigurationError(f"unknown procedure {name!r}")
    p = [float(v) for v in p_values]
    if name.startswith('planned-'):
        schedule = schedule or config.schedule or ScheduleSpec.online(len(p))
        return _direct_planned(name, config, p, schedule)
    return _direct_online(name, config, p)


def without_stopping(config: ProcedureConfig) -> ProcedureConfig:
    return replace(config, stopping=None)
