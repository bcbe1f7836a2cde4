"""Checkpoint coordinator: quiesce, concurrent staging, global barrier, atomic commit.

One checkpoint instance runs through::

    Idle -> Quiesce -> Writing -> Barrier -> Committing -> Pruning -> Resuming -> Idle

with any phase allowed to fall to Aborted (and Aborted back to Idle).  The
previous generation is pruned only after the new one is committed, and the
commit happens only once every agent has reported its image staged.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field

from . import protocol as p
from .agent import Role
from .bandwidth import BandwidthModel
from .errors import (
    AgentUnreachable,
    Busy,
    CorruptImage,
    GenckptError,
    IllegalTransition,
    NotFound,
    RestoreRefused,
)
from .hooks import NO_FAULTS, FaultHooks
from .manifest import GenerationId
from .precious import RestoreResult, restore_precious
from .scheduler import TriggerReason, estimate_checkpoint_duration
from .store import GenerationStore, OverwriteStore

log = logging.getLogger(__name__)

BARRIER_FLOOR = 30.0


class CkptPhase(str, enum.Enum):
    IDLE = "Idle"
    QUIESCE = "Quiesce"
    WRITING = "Writing"
    BARRIER = "Barrier"
    COMMITTING = "Committing"
    PRUNING = "Pruning"
    RESUMING = "Resuming"
    ABORTED = "Aborted"


_ORDER = [
    CkptPhase.IDLE, CkptPhase.QUIESCE, CkptPhase.WRITING, CkptPhase.BARRIER,
    CkptPhase.COMMITTING, CkptPhase.PRUNING, CkptPhase.RESUMING,
]


def legal_transition(src: CkptPhase, dst: CkptPhase) -> bool:
    if dst is CkptPhase.ABORTED:
        return src is not CkptPhase.ABORTED
    if src is CkptPhase.ABORTED:
        return dst is CkptPhase.IDLE
    i = _ORDER.index(src)
    return _ORDER[(i + 1) % len(_ORDER)] is dst


class Outcome(str, enum.Enum):
    COMMITTED = "committed"
    ABORTED = "aborted"
    TIMED_OUT = "timed_out"


@dataclass
class AgentHandle:
    process_id: int
    role: Role
    declared_footprint: int
    connection: object


@dataclass(frozen=True)
class ProcessStats:
    image_bytes: int
    write_duration: float


@dataclass
class CheckpointReport:
    generation: GenerationId
    trigger: TriggerReason
    outcome: Outcome
    per_process: dict[int, ProcessStats] = field(default_factory=dict)
    precious_bytes: int = 0
    precious_count: int = 0
    precious_duration: float = 0.0
    barrier_wait: dict[int, float] = field(default_factory=dict)
    unresumed: list[int] = field(default_factory=list)
    pruned: list[int] = field(default_factory=list)
    error: str = ""

    @property
    def image_bytes(self) -> int:
        return sum(s.image_bytes for s in self.per_process.values())

    @property
    def image_duration(self) -> float:
        return sum(s.write_duration for s in self.per_process.values())

    def to_dict(self) -> dict:
        return {
            "generation": self.generation.index,
            "created_at": self.generation.created_at,
            "trigger": self.trigger.value,
            "outcome": self.outcome.value,
            "per_process": {
                str(pid): {"image_bytes": s.image_bytes, "write_duration": s.write_duration}
                for pid, s in sorted(self.per_process.items())
            },
            "precious_bytes": self.precious_bytes,
            "precious_count": self.precious_count,
            "precious_duration": self.precious_duration,
            "barrier_wait": {str(k): v for k, v in sorted(self.barrier_wait.items())},
            "unresumed": self.unresumed,
            "pruned": self.pruned,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointReport":
        return cls(
            generation=GenerationId(d["generation"], d.get("created_at", 0.0)),
            trigger=TriggerReason(d["trigger"]),
            outcome=Outcome(d["outcome"]),
            per_process={
                int(k): ProcessStats(v["image_bytes"], v["write_duration"]) for k, v in d["per_process"].items()
            },
            precious_bytes=d["precious_bytes"],
            precious_count=d.get("precious_count", 0),
            precious_duration=d["precious_duration"],
            barrier_wait={int(k): v for k, v in d["barrier_wait"].items()},
            unresumed=list(d.get("unresumed", [])),
            pruned=list(d.get("pruned", [])),
            error=d.get("error", ""),
        )


@dataclass
class AllArrived:
    staged: dict[int, p.ImageStaged]
    arrival: dict[int, float]


@dataclass
class Timeout:
    missing: list[int]
    unreachable: list[int] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)
    staged: dict[int, p.ImageStaged] = field(default_factory=dict)


@dataclass
class RestoreReport:
    generation: GenerationId
    restored_paths: list[str]
    overwritten: list[str]
    image_digests: dict[int, str]


class Coordinator:
    """Drives checkpoint and restore across registered agents.

    ``store`` is a ``GenerationStore`` (atomic commit) or an
    ``OverwriteStore`` (the unsafe baseline, no barrier semantics).
    """

    def __init__(
        self,
        store: GenerationStore | OverwriteStore,
        keep_k: int | None = None,
        barrier_timeout: float | None = None,
        bandwidth: BandwidthModel | None = None,
        hooks: FaultHooks = NO_FAULTS,
        clock=None,
    ):
        self.store = store
        self.keep_k = keep_k if keep_k is not None else getattr(store, "keep", 2)
        self.barrier_timeout = barrier_timeout
        self.bandwidth = bandwidth
        self.hooks = hooks
        self.clock = clock or store.fs.now
        self.agents: dict[int, AgentHandle] = {}
        self.epoch = 1
        self.phase = CkptPhase.IDLE
        self.trace: list[tuple] = []
        self._lock = threading.RLock()

    @property
    def atomic(self) -> bool:
        return isinstance(self.store, GenerationStore)

    # -- phase machine ---------------------------------------------------
    def _enter(self, phase: CkptPhase, **info) -> None:
        with self._lock:
            if not legal_transition(self.phase, phase):
                raise IllegalTransition(f"{self.phase.value} -> {phase.value}")
            self.phase = phase
            self.trace.append(("phase", phase.value, info))
            log.debug("phase %s %s", phase.value, info)

    def _note(self, event: str, **info) -> None:
        self.trace.append((event, None, info))

    # -- registration ----------------------------------------------------
    def register(self, role=Role.WORKER, declared_footprint: int = 0, connection=None, requested_id: int = -1):
        """Add an agent; returns (epoch, process_id).  Refused while a checkpoint is in flight."""
        with self._lock:
            if self.phase in (CkptPhase.QUIESCE, CkptPhase.WRITING, CkptPhase.BARRIER, CkptPhase.COMMITTING):
                raise Busy(f"cannot register during {self.phase.value}")
            pid = requested_id
            if pid < 0 or pid in self.agents:
                pid = 0
                while pid in self.agents:
                    pid += 1
            self.agents[pid] = AgentHandle(pid, Role(role), declared_footprint, connection)
            return self.epoch, pid

    def attach(self, link):
        """Register the agent on the far side of ``link``; the agent speaks first for socket links."""
        if isinstance(link, p.DirectLink):
            msg = link.agent.register_message()
        else:
            msg = link.recv(self.barrier_timeout or BARRIER_FLOOR)
        if not isinstance(msg, p.Register):
            raise GenckptError(f"expected REGISTER, got {msg!r}")
        epoch, pid = self.register(msg.role, msg.declared_footprint, link, msg.requested_id)
        link.send(p.RegisterAck(pid, epoch))
        if isinstance(link, p.DirectLink):
            link.recv()
        return pid

    def detach(self, process_id: int) -> None:
        with self._lock:
            if self.phase is not CkptPhase.IDLE:
                raise Busy("cannot detach during a checkpoint")
            self.agents.pop(process_id, None)

    @property
    def process_count(self) -> int:
        return len(self.agents)

    def default_barrier_timeout(self) -> float:
        if self.barrier_timeout is not None:
            return self.barrier_timeout
        if self.bandwidth is None or not self.agents:
            return BARRIER_FLOOR
        slowest = max(a.declared_footprint for a in self.agents.values())
        predicted = estimate_checkpoint_duration(slowest, self.bandwidth).expected
        return max(BARRIER_FLOOR, 10 * predicted)

    # -- checkpoint ------------------------------------------------------
    def _links(self):
        return {pid: a.connection for pid, a in sorted(self.agents.items())}

    def run_checkpoint(self, trigger: TriggerReason = TriggerReason.MANUAL) -> CheckpointReport:
        with self._lock:
            if self.phase is not CkptPhase.IDLE:
                raise Busy(f"checkpoint already in progress ({self.phase.value})")
            if not self.agents:
                raise GenckptError("no agents registered")
            m = len(self.agents)
            gen = self.store.allocate_generation()
            self._enter(CkptPhase.QUIESCE, generation=gen.index, m=m)
        report = CheckpointReport(gen, TriggerReason(trigger), Outcome.ABORTED)
        timeout = self.default_barrier_timeout()
        try:
            staging = self.store.begin_generation(gen, m) if self.atomic else self.store.begin(gen.index, m)
        except GenckptError as e:
            report.error = f"cannot open staging: {e}"
            self._finish_abort(gen, None, report, reachable=self._links())
            return report
        links = self._links()
        t_request = self.clock()

        # Quiesce: every agent must acknowledge before anyone is considered writing.
        unreachable = []
        for pid, link in links.items():
            try:
                link.send(p.CkptRequest(gen.index))
            except AgentUnreachable:
                unreachable.append(pid)
        for pid, link in links.items():
            if pid in unreachable:
                continue
            try:
                ack = link.recv(timeout)
            except AgentUnreachable:
                unreachable.append(pid)
                continue
            if not isinstance(ack, p.QuiesceAck) or ack.process_id != pid:
                unreachable.append(pid)
        if unreachable:
            report.error = f"agents unreachable during quiesce: {sorted(unreachable)}"
            self._finish_abort(gen, staging, report, {k: v for k, v in links.items() if k not in unreachable})
            return report
        self.hooks.hit("after_quiesce", index=gen.index)
        self._enter(CkptPhase.WRITING, generation=gen.index)

        result = self.barrier_wait(gen, m, timeout)
        if isinstance(result, Timeout):
            report.per_process = {
                pid: ProcessStats(s.byte_size, s.image_seconds) for pid, s in result.staged.items()
            }
            if result.failed:
                report.error = f"staging failed: {result.failed}"
            elif result.unreachable:
                report.error = f"agents lost during writing: {result.unreachable}"
            else:
                report.outcome = Outcome.TIMED_OUT
                report.error = f"barrier timeout, missing {result.missing}"
            lost = set(result.unreachable)
            self._finish_abort(gen, staging, report, {k: v for k, v in links.items() if k not in lost})
            return report

        release = self.clock()
        for pid, s in result.staged.items():
            report.per_process[pid] = ProcessStats(s.byte_size, s.image_seconds)
            report.precious_bytes += s.precious_bytes
            report.precious_count += s.precious_count
            report.precious_duration += s.precious_seconds
            report.barrier_wait[pid] = max(0.0, release - result.arrival[pid])
        self.hooks.hit("at_barrier", index=gen.index)

        self._enter(CkptPhase.COMMITTING, generation=gen.index)
        timings = {
            "quiesce_writing_barrier_ms": (release - t_request) * 1000.0,
            "image_write_ms": report.image_duration * 1000.0,
            "precious_write_ms": report.precious_duration * 1000.0,
        }
        if self.atomic:
            try:
                self.store.commit_generation(staging, timings)
            except GenckptError as e:
                report.error = f"commit failed: {e}"
                self._finish_abort(gen, staging, report, links)
                return report
        self._note("committed", generation=gen.index)
        report.outcome = Outcome.COMMITTED
        for link in links.values():
            try:
                link.send(p.CommitDone(gen.index))
            except AgentUnreachable:
                pass

        self._enter(CkptPhase.PRUNING, generation=gen.index)
        if self.atomic:
            removed = self.store.prune(self.keep_k)
            report.pruned = [g.index for g in removed]
            for g in removed:
                self._note("pruned", generation=g.index)

        self._enter(CkptPhase.RESUMING, generation=gen.index)
        report.unresumed = self._resume(links, p.Resume())
        self._enter(CkptPhase.IDLE)
        return report

    def barrier_wait(self, gen: GenerationId, expected: int, timeout: float):
        """Collect IMAGE_STAGED from every agent.  AllArrived only if all ``expected`` report in time."""
        self._enter(CkptPhase.BARRIER, generation=gen.index, expected=expected)
        deadline = time.monotonic() + timeout
        links = self._links()
        staged: dict[int, p.ImageStaged] = {}
        arrival: dict[int, float] = {}
        unreachable, failed = [], {}
        for pid, link in links.items():
            while True:
                remaining = max(0.0, deadline - time.monotonic())
                try:
                    msg = link.recv(remaining)
                except AgentUnreachable:
                    unreachable.append(pid)
                    break
                if msg is None:
                    break
                if isinstance(msg, p.Failed):
                    failed[pid] = msg.reason
                    break
                if isinstance(msg, p.ImageStaged) and msg.process_id == pid:
                    staged[pid] = msg
                    arrival[pid] = self.clock()
                    self.hooks.hit("after_image_staged", index=gen.index, process_id=pid)
                    break
        missing = [pid for pid in links if pid not in staged]
        if missing or len(staged) != expected:
            self._note("barrier_timeout", generation=gen.index, missing=missing)
            return Timeout(missing, unreachable, failed, staged)
        self._note("all_arrived", generation=gen.index, arrived=sorted(staged), expected=expected)
        return AllArrived(staged, arrival)

    def abort_checkpoint(self, gen: GenerationId, staging=None) -> list[int]:
        """Drop the staging area and resume every reachable agent; returns unresumed ids."""
        with self._lock:
            if self.phase not in (CkptPhase.WRITING, CkptPhase.BARRIER, CkptPhase.QUIESCE):
                raise IllegalTransition(f"abort not allowed in {self.phase.value}")
        report = CheckpointReport(gen, TriggerReason.MANUAL, Outcome.ABORTED)
        self._finish_abort(gen, staging, report, self._links())
        return report.unresumed

    def _finish_abort(self, gen, staging, report: CheckpointReport, reachable: dict) -> None:
        if self.phase is not CkptPhase.IDLE:
            self._enter(CkptPhase.ABORTED, generation=gen.index, reason=report.error)
        if self.atomic:
            ok = self.store.abort_generation(staging if staging is not None else gen.index)
            if not ok:
                log.error("staging/%d left behind; recovery ignores it", gen.index)
        unresumed = self._resume(reachable, p.Abort(gen.index))
        report.unresumed = sorted(set(unresumed) | (set(self.agents) - set(reachable)))
        if self.phase is not CkptPhase.IDLE:
            self._enter(CkptPhase.IDLE)
        log.warning("checkpoint %d %s: %s", gen.index, report.outcome.value, report.error)

    def _resume(self, links: dict, msg) -> list[int]:
        unresumed = []
        for pid, link in links.items():
            try:
                link.send(msg)
                # drain lazily produced replies (none expected) so DirectLink agents run
                link.recv(0)
            except AgentUnreachable:
                unresumed.append(pid)
        return unresumed

    # -- restore ---------------------------------------------------------
    def run_restore(self, gen: GenerationId | int | None = None) -> RestoreReport:
        """Put precious files back and hand every agent its image."""
        if not self.atomic:
            raise RestoreRefused("the overwrite-in-place baseline has no restorable generations")
        with self._lock:
            if self.phase is not CkptPhase.IDLE:
                raise Busy(f"cannot restore during {self.phase.value}")
        if gen is None:
            gen = self.store.latest_committed()
            if gen is None:
                raise NotFound("store has no committed generation")
        loaded = self.store.load_generation(gen, verify=True)
        manifest = loaded.manifest
        if manifest.process_count != len(self.agents):
            raise RestoreRefused(
                f"generation {manifest.index} has {manifest.process_count} processes, {len(self.agents)} agents attached"
            )
        wanted = {im.process_id for im in manifest.images}
        if wanted != set(self.agents):
            raise RestoreRefused(f"agent ids {sorted(self.agents)} do not match image ids {sorted(wanted)}")
        result: RestoreResult = restore_precious(manifest.precious, loaded.precious_bytes)
        digests = {}
        for pid, link in self._links().items():
            link.send(p.Restore(manifest.index))
            msg = link.recv(self.default_barrier_timeout())
            if isinstance(msg, p.Failed):
                raise CorruptImage(f"process {pid} could not restore: {msg.reason}")
            if not isinstance(msg, p.RestoreAck):
                raise AgentUnreachable(f"process {pid} did not acknowledge restore")
            digests[pid] = msg.digest.hex()
            if digests[pid] != manifest.image(pid).checksum:
                raise CorruptImage(f"process {pid} restored an image with the wrong digest")
        self._note("restored", generation=manifest.index)
        return RestoreReport(manifest.generation, result.restored, result.overwritten, digests)
