"""
Online Testing State
Domain types, the append-only sequential testing state and alpha-wealth
bookkeeping shared by every threshold rule
"""
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

# Absolute slack allowed on wealth and FDP-estimate comparisons
WEALTH_TOLERANCE = 1e-12


class OnlineFDRError(Exception):
    """Base class for every error raised by the online FDR toolkit"""


class ParameterDomainError(OnlineFDRError, ValueError):
    """A p-value, threshold, lambda or level lies outside its domain"""


class ScheduleError(OnlineFDRError, ValueError):
    """Specification times are inconsistent with the stream being tested"""


class ConfigurationError(OnlineFDRError, ValueError):
    """A procedure, stopping rule or scenario is configured inconsistently"""


class EstimatorApplicabilityError(OnlineFDRError, ValueError):
    """An estimator or metric needs information the records do not carry"""


class InsufficientDataError(OnlineFDRError, ValueError):
    """Too few replications to aggregate"""


class UnsupportedCovarianceError(ConfigurationError):
    """Block correlation outside [0, 1)"""


class WealthInvariantError(OnlineFDRError, RuntimeError):
    """Alpha wealth went negative; the running sums are corrupted"""


@dataclass(frozen=True)
class PValue:
    """A p-value in [0, 1]"""
    value: float

    def __post_init__(self):
        value = float(self.value)
        # NaN fails both comparisons
        if not (0.0 <= value <= 1.0):
            raise ParameterDomainError(f"p-value must lie in [0, 1], got {self.value!r}")
        object.__setattr__(self, 'value', value)

    def __float__(self) -> float:
        return self.value


PValueLike = Union[PValue, float]


@dataclass(frozen=True)
class HypothesisRecord:
    """One completed test: the decision and every parameter used to reach it

    rejected is (alpha > 0 and p <= alpha); a zero threshold never rejects.
    """
    index: int
    p: PValue
    alpha: float
    specified_at: int
    batch: int
    rejected: bool
    alpha_bar: Optional[float] = None
    lmbda: Optional[float] = None
    is_null: Optional[bool] = None


@dataclass(frozen=True)
class PlannedThreshold:
    """Parameters fixed for hypothesis `index` at specification time `specified_at`"""
    index: int
    alpha: float
    specified_at: int
    alpha_bar: Optional[float] = None
    lmbda: Optional[float] = None
    wealth: float = 0.0  # bracketed wealth term the threshold was drawn from


@dataclass(frozen=True)
class _Tally:
    """Running sums after a given record"""
    rejection_count: int = 0
    spent_sum: float = 0.0
    penalty_sum: float = 0.0
    lambda_numerator: float = 0.0
    null_spent_sum: float = 0.0
    false_discoveries: int = 0
    true_discoveries: int = 0
    false_nulls: int = 0
    missing_lambda: int = 0
    missing_truth: int = 0
    stopped: bool = False
    plan_count: int = 0
    planned_alpha_sum: float = 0.0
    planned_penalty_sum: float = 0.0


_EMPTY_TALLY = _Tally()


class _AppendLog:
    """Shared append-only storage; every state is a view of a prefix of it"""
    __slots__ = ('items',)

    def __init__(self, items: Optional[List] = None):
        self.items = items if items is not None else []

    def extend_view(self, length: int, item) -> '_AppendLog':
        if length == len(self.items):
            self.items.append(item)
            return self
        # Appending from an older view forks the log
        return type(self)(self.items[:length] + [item])


class _PlanLog(_AppendLog):
    __slots__ = ('positions',)

    def __init__(self, items: Optional[List[PlannedThreshold]] = None):
        super().__init__(items)
        self.positions = {plan.index: pos for pos, plan in enumerate(self.items)}

    def extend_view(self, length: int, item: PlannedThreshold) -> '_PlanLog':
        log = super().extend_view(length, item)
        log.positions[item.index] = length
        return log


@dataclass(frozen=True, eq=False)
class ProcedureState:
    """
    Sequential wealth-accounting state of one stream.

    Immutable from the caller's point of view: `advance` and `commit_plans`
    return new states and never touch existing records.
    """
    level: float
    _log: _AppendLog = field(default_factory=_AppendLog, repr=False)
    _length: int = 0
    _plans: _PlanLog = field(default_factory=_PlanLog, repr=False)
    _plan_count: int = 0
    planned_alpha_sum: float = 0.0
    planned_penalty_sum: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.level <= 1.0):
            raise ParameterDomainError(f"level must lie in (0, 1], got {self.level!r}")

    @property
    def _tally(self) -> _Tally:
        if self._length == 0:
            return _EMPTY_TALLY
        return self._log.items[self._length - 1][1]

    @property
    def t(self) -> int:
        """Number of completed tests"""
        return self._length

    def __len__(self) -> int:
        return self._length

    @property
    def records(self) -> Tuple[HypothesisRecord, ...]:
        return tuple(entry[0] for entry in self._log.items[:self._length])

    def record(self, index: int) -> HypothesisRecord:
        """Record of hypothesis `index` (1-based)"""
        if not 1 <= index <= self._length:
            raise IndexError(f"no record {index} in a state of {self._length} tests")
        return self._log.items[index - 1][0]

    @property
    def rejection_count(self) -> int:
        return self._tally.rejection_count

    @property
    def spent_sum(self) -> float:
        return self._tally.spent_sum

    @property
    def penalty_sum(self) -> float:
        """Sum of alpha_bar_i * 1(P_i > lambda_i) / (1 - lambda_i), alpha_i where alpha_bar is absent"""
        return self._tally.penalty_sum

    @property
    def lambda_numerator(self) -> float:
        """Sum of alpha_i * 1(P_i > lambda_i) / (1 - lambda_i): the FDP_lambda numerator"""
        return self._tally.lambda_numerator

    @property
    def null_spent_sum(self) -> float:
        return self._tally.null_spent_sum

    @property
    def false_discoveries(self) -> int:
        return self._tally.false_discoveries

    @property
    def true_discoveries(self) -> int:
        return self._tally.true_discoveries

    @property
    def false_nulls(self) -> int:
        return self._tally.false_nulls

    @property
    def missing_lambda(self) -> int:
        return self._tally.missing_lambda

    @property
    def missing_truth(self) -> int:
        return self._tally.missing_truth

    @property
    def stopped(self) -> bool:
        return self._tally.stopped

    @property
    def plan_count(self) -> int:
        return self._plan_count

    def plan_for(self, index: int) -> Optional[PlannedThreshold]:
        pos = self._plans.positions.get(index)
        if pos is None or pos >= self._plan_count:
            return None
        return self._plans.items[pos]

    def prefix(self, t: int) -> 'ProcedureState':
        """The state exactly as it was right after record t"""
        if not 0 <= t <= self._length:
            raise ParameterDomainError(f"t={t} outside 0..{self._length}")
        if t == self._length:
            return self
        tally = self._log.items[t - 1][1] if t else _EMPTY_TALLY
        return replace(
            self,
            _length=t,
            _plan_count=tally.plan_count,
            planned_alpha_sum=tally.planned_alpha_sum,
            planned_penalty_sum=tally.planned_penalty_sum,
        )


def _check_threshold(name: str, value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    if not (value >= 0.0 and math.isfinite(value)):
        raise ParameterDomainError(f"{name} must be a finite value >= 0, got {value!r}")
    return value


def _check_lambda(lmbda: Optional[float], alpha: float) -> Optional[float]:
    if lmbda is None:
        return None
    lmbda = float(lmbda)
    # lambda == 0 only for a zero-spend step (alpha investing with no wealth)
    if 0.0 < lmbda < 1.0 or (lmbda == 0.0 and alpha == 0.0):
        return lmbda
    raise ParameterDomainError(f"lambda must lie in (0, 1), got {lmbda!r}")


def advance(state: ProcedureState,
            p: PValueLike,
            alpha: float,
            lmbda: Optional[float] = None,
            alpha_bar: Optional[float] = None,
            specified_at: Optional[int] = None,
            batch: Optional[int] = None,
            *,
            is_null: Optional[bool] = None,
            stop: bool = False) -> ProcedureState:
    """
    Test the next hypothesis and return the updated state.

    Args:
        state: State holding the t-1 completed tests
        p: p-value of hypothesis t
        alpha: Threshold alpha_t; H_t is rejected when alpha > 0 and p <= alpha.
            A zero threshold marks an untested hypothesis (stopped stream or
            exhausted wealth) and never rejects, even for p = 0
        lmbda: Candidate cutoff lambda_t (SAFFRON family only)
        alpha_bar: Candidate threshold before the min with lambda
        specified_at: Specification time s_t (defaults to t-1)
        batch: Batch label b_t (defaults to t)
        is_null: Ground truth, simulation only
        stop: Latch the stopped flag from this record on

    Returns:
        New state with one more record
    """
    pvalue = p if isinstance(p, PValue) else PValue(p)
    alpha = _check_threshold('alpha', alpha)
    alpha_bar = _check_threshold('alpha_bar', alpha_bar)
    lmbda = _check_lambda(lmbda, alpha)
    index = state.t + 1

    if alpha_bar is not None:
        if lmbda is None:
            raise ParameterDomainError("alpha_bar requires lambda")
        if alpha != min(lmbda, alpha_bar):
            raise ParameterDomainError(
                f"alpha={alpha!r} must equal min(lambda, alpha_bar)={min(lmbda, alpha_bar)!r}"
            )
    if specified_at is None:
        specified_at = index - 1
    if not 0 <= specified_at < index:
        raise ScheduleError(f"specification time {specified_at} must lie in [0, {index})")
    if batch is None:
        batch = index
    if batch < 1:
        raise ParameterDomainError(f"batch label must be positive, got {batch!r}")

    prev = state._tally
    if prev.stopped and alpha > 0.0:
        raise ParameterDomainError(f"testing has stopped; alpha_{index} must be 0, got {alpha!r}")

    # A zero threshold means the hypothesis is not tested
    rejected = alpha > 0.0 and pvalue.value <= alpha
    penalty_sum = prev.penalty_sum
    lambda_numerator = prev.lambda_numerator
    missing_lambda = prev.missing_lambda
    if lmbda is None:
        missing_lambda += 1
    elif pvalue.value > lmbda:
        weight = alpha_bar if alpha_bar is not None else alpha
        penalty_sum += weight / (1.0 - lmbda)
        lambda_numerator += alpha / (1.0 - lmbda)

    false_discoveries = prev.false_discoveries
    true_discoveries = prev.true_discoveries
    false_nulls = prev.false_nulls
    null_spent_sum = prev.null_spent_sum
    missing_truth = prev.missing_truth
    if is_null is None:
        missing_truth += 1
    elif is_null:
        null_spent_sum += alpha
        false_discoveries += rejected
    else:
        false_nulls += 1
        true_discoveries += rejected

    # An observed p-value at or below its planned lambda no longer counts
    # towards the conservative planned-SAFFRON bound
    planned_penalty_sum = state.planned_penalty_sum
    plan = state.plan_for(index)
    if plan is not None and plan.lmbda is not None and pvalue.value <= plan.lmbda:
        planned_penalty_sum -= plan.alpha / (1.0 - plan.lmbda)

    record = HypothesisRecord(
        index=index,
        p=pvalue,
        alpha=alpha,
        specified_at=specified_at,
        batch=batch,
        rejected=rejected,
        alpha_bar=alpha_bar,
        lmbda=lmbda,
        is_null=is_null,
    )
    tally = _Tally(
        rejection_count=prev.rejection_count + rejected,
        spent_sum=prev.spent_sum + alpha,
        penalty_sum=penalty_sum,
        lambda_numerator=lambda_numerator,
        null_spent_sum=null_spent_sum,
        false_discoveries=false_discoveries,
        true_discoveries=true_discoveries,
        false_nulls=false_nulls,
        missing_lambda=missing_lambda,
        missing_truth=missing_truth,
        stopped=prev.stopped or stop,
        plan_count=state.plan_count,
        planned_alpha_sum=state.planned_alpha_sum,
        planned_penalty_sum=planned_penalty_sum,
    )
    return replace(
        state,
        _log=state._log.extend_view(state.t, (record, tally)),
        _length=index,
        planned_penalty_sum=planned_penalty_sum,
    )


def commit_plans(state: ProcedureState, plans: Sequence[PlannedThreshold]) -> ProcedureState:
    """Record thresholds fixed at the current specification time"""
    log = state._plans
    count = state.plan_count
    alpha_sum = state.planned_alpha_sum
    penalty_sum = state.planned_penalty_sum
    for plan in plans:
        if plan.index <= state.t:
            raise ScheduleError(f"hypothesis {plan.index} was already tested; it cannot be planned")
        if log.positions.get(plan.index, count) < count:
            raise ScheduleError(f"hypothesis {plan.index} is planned twice")
        alpha_sum += plan.alpha
        if plan.lmbda is not None:
            penalty_sum += plan.alpha / (1.0 - plan.lmbda)
        log = log.extend_view(count, plan)
        count += 1
    return replace(
        state,
        _plans=log,
        _plan_count=count,
        planned_alpha_sum=alpha_sum,
        planned_penalty_sum=penalty_sum,
    )


def effective_denominator(state: ProcedureState) -> int:
    """1 v |R_t|"""
    return max(1, state.rejection_count)


@dataclass(frozen=True)
class SumAudit:
    """Incremental running sums against a full recomputation"""
    rejections_match: bool
    spent_drift: float
    penalty_drift: float
    lambda_numerator_drift: float

    @property
    def max_drift(self) -> float:
        return max(self.spent_drift, self.penalty_drift, self.lambda_numerator_drift)


def audit_running_sums(state: ProcedureState) -> SumAudit:
    """Recompute every running sum from the records and report the drift"""
    records = state.records
    spent = math.fsum(r.alpha for r in records)
    penalty = math.fsum(
        (r.alpha_bar if r.alpha_bar is not None else r.alpha) / (1.0 - r.lmbda)
        for r in records if r.lmbda is not None and r.p.value > r.lmbda
    )
    numerator = math.fsum(
        r.alpha / (1.0 - r.lmbda)
        for r in records if r.lmbda is not None and r.p.value > r.lmbda
    )
    return SumAudit(
        rejections_match=sum(r.rejected for r in records) == state.rejection_count,
        spent_drift=abs(spent - state.spent_sum),
        penalty_drift=abs(penalty - state.penalty_sum),
        lambda_numerator_drift=abs(numerator - state.lambda_numerator),
    )


@dataclass(frozen=True)
class ScheduleSpec:
    """
    Specification times s_i (by which alpha_i and lambda_i are fixed) and the
    number n_s of parameters fixed at each time s.

    s_i need not be monotone in i.
    """
    spec_times: Tuple[int, ...]
    group_sizes: Optional[Dict[int, int]] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        spec_times = tuple(int(s) for s in self.spec_times)
        groups: Dict[int, List[int]] = {}
        for i, s in enumerate(spec_times, start=1):
            if not 0 <= s < i:
                raise ScheduleError(f"s_{i}={s} must satisfy 0 <= s_i < i")
            groups.setdefault(s, []).append(i)
        counts = {s: len(members) for s, members in groups.items()}
        if self.group_sizes is not None and dict(self.group_sizes) != counts:
            raise ScheduleError(f"group sizes {dict(self.group_sizes)} do not match the specification times {counts}")
        # planned_before[s] = |{i : s_i < s}|
        before = [0] * (len(spec_times) + 1)
        for s in spec_times:
            if s + 1 <= len(spec_times):
                before[s + 1] += 1
        for s in range(1, len(before)):
            before[s] += before[s - 1]
        object.__setattr__(self, 'spec_times', spec_times)
        object.__setattr__(self, 'group_sizes', counts)
        object.__setattr__(self, '_groups', {s: tuple(members) for s, members in groups.items()})
        object.__setattr__(self, '_planned_before', tuple(before))

    @classmethod
    def online(cls, n: int) -> 'ScheduleSpec':
        """s_i = i - 1: the canonical online setting"""
        return cls(tuple(range(n)))

    @classmethod
    def from_spec_times(cls, spec_times: Sequence[int]) -> 'ScheduleSpec':
        return cls(tuple(spec_times))

    @classmethod
    def from_batches(cls, batches: Sequence[int]) -> 'ScheduleSpec':
        """s_i = max{i' : b_i' < b_i}, 0 when no earlier batch exists"""
        labels = sorted(set(batches))
        last_index: Dict[int, int] = {}
        for i, label in enumerate(batches, start=1):
            last_index[label] = i
        # latest index among all strictly smaller labels
        latest_below: Dict[int, int] = {}
        running = 0
        for label in labels:
            latest_below[label] = running
            running = max(running, last_index[label])
        return cls(tuple(latest_below[label] for label in batches))

    def __len__(self) -> int:
        return len(self.spec_times)

    def spec_time(self, i: int) -> int:
        if not 1 <= i <= len(self.spec_times):
            raise ScheduleError(f"hypothesis {i} is outside a schedule of {len(self.spec_times)}")
        return self.spec_times[i - 1]

    def group_size(self, s: int) -> int:
        size = self.group_sizes.get(s)
        if size is None:
            raise ScheduleError(f"no parameters are specified at time {s}")
        return size

    def groups(self) -> Dict[int, Tuple[int, ...]]:
        """Specification time -> indices fixed at that time"""
        return self._groups

    def planned_before(self, s: int) -> int:
        """Number of hypotheses whose parameters are fixed strictly before time s"""
        return self._planned_before[min(s, len(self._planned_before) - 1)]
