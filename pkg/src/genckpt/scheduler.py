"""When to checkpoint: periodic, at footprint minima, or just before the wall-time limit."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .bandwidth import BandwidthModel
from .errors import ModelError, TelemetryError

WALLTIME_48H = 172800.0


class TriggerReason(str, enum.Enum):
    PERIODIC = "periodic"
    APP_INITIATED = "app_initiated"
    WALLTIME_GUARD = "walltime_guard"
    MANUAL = "manual"


class PolicyMode(str, enum.Enum):
    PERIODIC = "periodic"
    APP_INITIATED = "app_initiated"
    WALLTIME_ONLY = "walltime_only"
    COMBINED = "combined"


class CostMetric(str, enum.Enum):
    SUM = "sum"
    FOOTPRINT = "footprint"
    PRECIOUS = "precious"


class GuardDecision(str, enum.Enum):
    CHECKPOINT_NOW = "checkpoint_now"
    WAIT = "wait"
    TOO_LATE_WARNING = "too_late_warning"


@dataclass(frozen=True)
class TelemetrySample:
    t: float
    footprint_bytes: int
    precious_bytes: int = 0
    stage_label: str = ""

    def cost(self, metric: CostMetric = CostMetric.SUM) -> int:
        if metric is CostMetric.FOOTPRINT:
            return self.footprint_bytes
        if metric is CostMetric.PRECIOUS:
            return self.precious_bytes
        return self.footprint_bytes + self.precious_bytes


@dataclass(frozen=True)
class CkptPolicyCfg:
    mode: PolicyMode = PolicyMode.PERIODIC
    period: float = 600.0
    window: int = 10
    walltime_limit: float = WALLTIME_48H
    safety_factor: float = 1.5
    percentile: float = 0.05
    metric: CostMetric = CostMetric.SUM
    start_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        object.__setattr__(self, "metric", CostMetric(self.metric))
        if self.mode in (PolicyMode.PERIODIC, PolicyMode.COMBINED, PolicyMode.APP_INITIATED) and not self.period > 0:
            raise ValueError("period must be positive")
        if self.safety_factor < 1:
            raise ValueError("safety_factor must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.percentile < 1:
            raise ValueError("percentile must be in (0, 1)")


@dataclass(frozen=True)
class DurationEstimate:
    expected: float
    upper_bound: float


@dataclass(frozen=True)
class Decision:
    checkpoint: bool
    reason: TriggerReason | None = None
    t: float = 0.0
    index: int = -1
    warning: bool = False

    @property
    def final(self) -> bool:
        return self.reason is TriggerReason.WALLTIME_GUARD


# ---------------------------------------------------------------------------


def estimate_checkpoint_duration(payload, model: BandwidthModel, percentile: float = 0.05) -> DurationEstimate:
    """Expected time at the mean congestion factor; upper bound at the low percentile.

    ``payload`` is a byte count, an iterable of byte counts, or a mapping with
    ``image_bytes`` (count or per-process list) and ``precious_bytes``.
    """
    total = _payload_total(payload)
    if total < 0:
        raise ValueError("payload must be non-negative")
    mean_rate = model.mean_rate()
    low_rate = model.quantile_rate(percentile)
    if not (mean_rate > 0 and low_rate > 0):
        raise ModelError("bandwidth model has zero effective rate")
    if total == 0:
        return DurationEstimate(0.0, 0.0)
    expected = total / mean_rate
    return DurationEstimate(expected, max(expected, total / low_rate))


def _payload_total(payload) -> int:
    if isinstance(payload, (int, float)):
        return payload
    if isinstance(payload, dict):
        images = payload.get("image_bytes", 0)
        images = images if isinstance(images, (int, float)) else sum(images)
        return images + payload.get("precious_bytes", 0)
    return sum(payload)


def walltime_guard(elapsed: float, policy: CkptPolicyCfg, estimate: DurationEstimate) -> GuardDecision:
    remaining = policy.walltime_limit - elapsed
    if remaining < estimate.expected:
        return GuardDecision.TOO_LATE_WARNING
    if remaining <= policy.safety_factor * estimate.upper_bound:
        return GuardDecision.CHECKPOINT_NOW
    return GuardDecision.WAIT


# ---------------------------------------------------------------------------


@dataclass
class TriggerState:
    """Everything the trigger logic remembers; plain data so it can be checkpointed."""

    last_t: float | None = None
    last_ckpt_t: float | None = None
    next_due: float | None = None
    recent: list[float] = field(default_factory=list)
    count: int = 0
    guard_fired: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerState":
        return cls(**d)


class Scheduler:
    """Online trigger.  Feed samples in time order; each returns a ``Decision``.

    app_initiated: fire at a sample whose cost is <= every cost in the trailing
    window (current sample included), provided period/2 has elapsed since the
    last checkpoint (or job start).  The first sample satisfying both fires,
    so among equal costs the earliest wins.
    """

    def __init__(
        self,
        policy: CkptPolicyCfg,
        estimate: Callable[[TelemetrySample], DurationEstimate] | None = None,
        state: TriggerState | None = None,
    ):
        self.policy = policy
        self.estimate = estimate
        self.state = state or TriggerState()
        if self.state.next_due is None:
            self.state.next_due = policy.start_time + policy.period

    def feed(self, sample: TelemetrySample) -> Decision:
        st, pol = self.state, self.policy
        if st.last_t is not None and not sample.t > st.last_t:
            raise TelemetryError(f"sample at t={sample.t} after t={st.last_t}")
        st.last_t = sample.t
        index = st.count
        st.count += 1
        cost = float(sample.cost(pol.metric))
        st.recent.append(cost)
        del st.recent[: -pol.window]

        if self.estimate is not None and not st.guard_fired and pol.walltime_limit > sample.t:
            guard = walltime_guard(sample.t, pol, self.estimate(sample))
            if guard is not GuardDecision.WAIT:
                st.guard_fired = True
                return self._fire(sample, index, TriggerReason.WALLTIME_GUARD, guard is GuardDecision.TOO_LATE_WARNING)

        if pol.mode in (PolicyMode.PERIODIC, PolicyMode.COMBINED) and sample.t >= st.next_due:
            return self._fire(sample, index, TriggerReason.PERIODIC)
        if pol.mode in (PolicyMode.APP_INITIATED, PolicyMode.COMBINED):
            since = sample.t - (st.last_ckpt_t if st.last_ckpt_t is not None else pol.start_time)
            if since >= pol.period / 2 and cost <= min(st.recent):
                return self._fire(sample, index, TriggerReason.APP_INITIATED)
        return Decision(False, None, sample.t, index)

    def _fire(self, sample, index, reason, warning=False) -> Decision:
        st, pol = self.state, self.policy
        st.last_ckpt_t = sample.t
        if pol.mode is PolicyMode.PERIODIC:
            st.next_due = (math.floor((sample.t - pol.start_time) / pol.period) + 1) * pol.period + pol.start_time
        else:
            st.next_due = sample.t + pol.period
        return Decision(True, reason, sample.t, index, warning)


def next_trigger(policy: CkptPolicyCfg, telemetry: Iterable[TelemetrySample], estimate=None) -> Iterator[Decision]:
    sched = Scheduler(policy, estimate)
    for sample in telemetry:
        yield sched.feed(sample)


# ---------------------------------------------------------------------------
# telemetry CSV: t,footprint_bytes,precious_bytes,stage_label

CSV_FIELDS = ("t", "footprint_bytes", "precious_bytes", "stage_label")


def telemetry_to_csv(samples: Sequence[TelemetrySample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for s in samples:
        w.writerow((repr(float(s.t)), s.footprint_bytes, s.precious_bytes, s.stage_label))
    return buf.getvalue()


def telemetry_from_csv(text: str) -> list[TelemetrySample]:
    rows = csv.DictReader(io.StringIO(text))
    if tuple(rows.fieldnames or ()) != CSV_FIELDS:
        raise TelemetryError(f"unexpected telemetry header {rows.fieldnames}")
    return [
        TelemetrySample(float(r["t"]), int(r["footprint_bytes"]), int(r["precious_bytes"]), r["stage_label"])
        for r in rows
    ]


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuardTrial:
    fired_at: float | None
    finished_at: float | None

    @property
    def completed(self) -> bool:
        return self.finished_at is not None


def guard_trial(
    policy: CkptPolicyCfg,
    payload_bytes: int,
    planning_model: BandwidthModel,
    realized_model: BandwidthModel,
    check_interval: float = 60.0,
) -> GuardTrial:
    """Poll ``walltime_guard`` every ``check_interval`` and run the checkpoint it asks for.

    The estimate comes from ``planning_model``; the write itself proceeds at
    the factors realized by ``realized_model``.  ``finished_at`` is None when
    the wall-time limit arrives first.
    """
    est = estimate_checkpoint_duration(payload_bytes, planning_model, policy.percentile)
    t = policy.start_time
    while t < policy.walltime_limit:
        if walltime_guard(t, policy, est) is not GuardDecision.WAIT:
            done = t + realized_model.transfer_time(t, payload_bytes)
            return GuardTrial(t, done if done <= policy.walltime_limit else None)
        t += check_interval
    return GuardTrial(None, None)
