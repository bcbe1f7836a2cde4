"""Crash injection across the checkpoint protocol and the storage writes.

Each trial clones a simulated filesystem that already holds one committed
instance, runs a second checkpoint with an injector armed at one
``FaultPoint``, takes the crash view of the filesystem (unsynced data gone),
and asks the recovery path what it can restore.

"Mixed" is defined operationally: the persistent store holds files from more
than one checkpoint instance, or a torn file next to complete ones, so no
single instance can be restored from it.
"""

from __future__ import annotations

import configparser
import csv
import enum
import hashlib
import io
import logging
import random
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .agent import Agent, Role
from .coordinator import Coordinator, Outcome
from .errors import GenckptError, HarnessError
from .fs import SimFS
from .hooks import FaultHooks, SimulatedCrash
from .manifest import Lifecycle, PreciousFileRecord
from .protocol import DirectLink
from .scheduler import TriggerReason
from .store import GenerationStore, OverwriteStore

log = logging.getLogger(__name__)

MiB = 1 << 20
STORE_ROOT = "/ckpt"


class Location(str, enum.Enum):
    AFTER_QUIESCE = "after_quiesce"
    DURING_IMAGE_WRITE = "during_image_write"
    AFTER_IMAGE_STAGED = "after_image_staged"
    AT_BARRIER = "at_barrier"
    BEFORE_COMMIT_RENAME = "before_commit_rename"
    AFTER_COMMIT_RENAME = "after_commit_rename"
    DURING_PRUNE = "during_prune"
    DURING_PRECIOUS_WRITE = "during_precious_write"
    STORAGE_EVENT = "storage_event"


class Mode(str, enum.Enum):
    ATOMIC = "atomic_commit"
    OVERWRITE = "overwrite_in_place"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        aliases = {"atomic": cls.ATOMIC, "overwrite": cls.OVERWRITE}
        return aliases.get(text) or cls(text)


@dataclass(frozen=True)
class FaultPoint:
    location: Location
    process_id: int | None = None
    path: str | None = None
    byte_offset: int | None = None
    trial_seed: int = 0

    def label(self) -> str:
        parts = [self.location.value]
        if self.process_id is not None:
            parts.append(f"pid={self.process_id}")
        if self.path is not None:
            parts.append(f"path={self.path}")
        if self.byte_offset is not None:
            parts.append(f"offset={self.byte_offset}")
        return " ".join(parts)


@dataclass(frozen=True)
class Scenario:
    """What the second checkpoint writes.  Process 0 is the driver; the last process owns the precious files."""

    image_sizes: tuple[int, ...] = (2 * MiB, 300 * MiB)
    precious_sizes: tuple[int, ...] = (20 * MiB,) * 10
    n_random: int = 1000
    seed: int = 0
    keep_k: int = 1
    drop_unflushed: bool = True
    atomic_rename: bool = True

    def __post_init__(self):
        if not self.image_sizes:
            raise ValueError("scenario needs at least one process")
        if any(s < 0 for s in self.image_sizes + self.precious_sizes):
            raise ValueError("sizes must be non-negative")

    @property
    def m(self) -> int:
        return len(self.image_sizes)

    @property
    def precious_paths(self) -> tuple[str, ...]:
        return tuple(f"/work/tmp_{i:03d}.bin" for i in range(len(self.precious_sizes)))

    @classmethod
    def from_file(cls, path: str) -> "Scenario":
        """Read an INI file with a ``[scenario]`` section; sizes accept a ``MiB`` or ``KiB`` suffix."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise HarnessError(f"cannot read scenario file {path}")
        return cls.from_config(cp)

    @classmethod
    def from_config(cls, cp: configparser.ConfigParser) -> "Scenario":
        if not cp.has_section("scenario"):
            raise HarnessError("scenario file has no [scenario] section")
        sec = cp["scenario"]
        kwargs = {}
        try:
            if "image_sizes" in sec:
                kwargs["image_sizes"] = tuple(parse_size(s) for s in sec["image_sizes"].split(","))
            if "precious_sizes" in sec:
                text = sec["precious_sizes"].strip()
                kwargs["precious_sizes"] = _parse_size_list(text)
            for key in ("n_random", "seed", "keep_k"):
                if key in sec:
                    kwargs[key] = sec.getint(key)
            for key in ("drop_unflushed", "atomic_rename"):
                if key in sec:
                    kwargs[key] = sec.getboolean(key)
        except ValueError as e:
            raise HarnessError(f"bad scenario value: {e}") from e
        return cls(**kwargs)


def parse_size(text: str) -> int:
    text = text.strip()
    for suffix, mult in (("GiB", 1 << 30), ("MiB", MiB), ("KiB", 1 << 10), ("B", 1)):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * mult)
    return int(text)


def _parse_size_list(text: str) -> tuple[int, ...]:
    """``20MiB x 10`` or a comma-separated list; empty means no precious files."""
    if not text:
        return ()
    if "x" in text and "," not in text:
        size, count = text.rsplit("x", 1)
        return (parse_size(size),) * int(count)
    return tuple(parse_size(s) for s in text.split(","))


@dataclass(frozen=True)
class Verdict:
    point: FaultPoint
    mode: Mode
    recoverable: bool
    recovered_generation: int | None
    mixed_state_detected: bool
    reached: bool = True
    detail: str = ""


@dataclass
class SweepSummary:
    total: int = 0
    recoverable_count: int = 0
    mixed_count: int = 0
    failures: list[Verdict] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)

    def add(self, v: Verdict) -> None:
        self.total += 1
        self.verdicts.append(v)
        self.recoverable_count += v.recoverable
        self.mixed_count += v.mixed_state_detected
        if not v.recoverable or v.mixed_state_detected:
            self.failures.append(v)


# ---------------------------------------------------------------------------


def enumerate_fault_points(scenario: Scenario) -> list[FaultPoint]:
    """Transition points in protocol order, then ``n_random`` byte offsets inside image writes.

    Random points pick the process uniformly, then an offset uniformly inside
    that process's image, so the small image is not starved by the large one.
    """
    pts = [FaultPoint(Location.AFTER_QUIESCE)]
    owner = scenario.m - 1
    for pid in range(scenario.m):
        pts.append(FaultPoint(Location.AFTER_IMAGE_STAGED, process_id=pid))
    for path, size in zip(scenario.precious_paths, scenario.precious_sizes):
        pts.append(FaultPoint(Location.DURING_PRECIOUS_WRITE, process_id=owner, path=path, byte_offset=size // 2))
    pts += [
        FaultPoint(Location.AT_BARRIER),
        FaultPoint(Location.BEFORE_COMMIT_RENAME),
        FaultPoint(Location.AFTER_COMMIT_RENAME),
        FaultPoint(Location.DURING_PRUNE),
    ]
    rng = random.Random(scenario.seed)
    writable = [pid for pid, size in enumerate(scenario.image_sizes) if size > 0]
    for i in range(scenario.n_random if writable else 0):
        pid = rng.choice(writable)
        off = rng.randrange(scenario.image_sizes[pid])
        pts.append(FaultPoint(Location.DURING_IMAGE_WRITE, process_id=pid, byte_offset=off, trial_seed=i))
    return pts


class Injector(FaultHooks):
    """Raises ``SimulatedCrash`` when execution reaches ``point``."""

    def __init__(self, point: FaultPoint):
        self.point = point
        self.fired = False

    def _fire(self, where: str):
        self.fired = True
        raise SimulatedCrash(where)

    def hit(self, location: str, **ctx) -> None:
        pt = self.point
        if self.fired or location != pt.location.value:
            return
        if pt.process_id is not None and "process_id" in ctx and ctx["process_id"] != pt.process_id:
            return
        self._fire(self.point.label())

    def write_budget(self, tag: tuple, offset: int, length: int) -> int | None:
        pt = self.point
        if self.fired:
            return None
        if pt.location is Location.DURING_IMAGE_WRITE:
            want = ("image", pt.process_id)
        elif pt.location is Location.DURING_PRECIOUS_WRITE:
            want = ("precious", pt.path)
        else:
            return None
        if tag == want and offset <= pt.byte_offset < offset + length:
            self.fired = True
            return pt.byte_offset - offset
        return None


class _StaticTracker:
    """Precious set with precomputed contents, standing in for a worker's tracker."""

    def __init__(self, items):
        self.items = items

    def collect(self):
        return iter(self.items)


class _PayloadAgent(Agent):
    """Agent whose snapshot is a fixed, pre-built payload (no per-trial copying)."""

    def __init__(self, store, role, payload, tracker=None):
        super().__init__(store, role, len(payload), tracker=tracker)
        self.payload = payload

    def snapshot(self):
        return self.payload, len(self.payload)


@dataclass
class _Instance:
    images: dict[int, memoryview]
    image_digests: dict[int, str]
    precious: list[tuple[PreciousFileRecord, memoryview]]

    @property
    def precious_digests(self) -> dict[str, str]:
        return {r.original_path: r.checksum for r, _ in self.precious}


def _payload(seed: int, tag: int, size: int) -> memoryview:
    return memoryview(np.random.default_rng([seed, tag]).bytes(size))


def _instance(scenario: Scenario, salt: int) -> _Instance:
    images, digests = {}, {}
    for pid, size in enumerate(scenario.image_sizes):
        images[pid] = _payload(scenario.seed + salt, pid, size)
        digests[pid] = hashlib.sha256(images[pid]).hexdigest()
    precious = []
    for i, (path, size) in enumerate(zip(scenario.precious_paths, scenario.precious_sizes)):
        data = _payload(scenario.seed + salt, 1000 + i, size)
        lifecycle = Lifecycle.DELETION_PENDING if i % 3 == 2 else Lifecycle.LIVE
        precious.append((PreciousFileRecord(path, size, hashlib.sha256(data).hexdigest(), lifecycle), data))
    return _Instance(images, digests, precious)


class Harness:
    """Prepared fixture for one scenario and mode: base filesystem plus both instances' payloads."""

    def __init__(self, scenario: Scenario, mode: Mode | str = Mode.ATOMIC):
        self.scenario = scenario
        self.mode = Mode.parse(mode) if isinstance(mode, str) else mode
        self.old = _instance(scenario, salt=0)
        self.new = _instance(scenario, salt=7919)
        self.base = SimFS(drop_unflushed=scenario.drop_unflushed, atomic_rename=scenario.atomic_rename)
        report, _ = self._checkpoint(self.base, self.old, FaultHooks())
        if report is None or report.outcome is not Outcome.COMMITTED:
            raise HarnessError("could not seed the base generation")
        self.base = self.base.crash()
        self.prev_index = report.generation.index
        if self.mode is Mode.ATOMIC:
            # hash the seeded files once; clones inherit the cached digests
            GenerationStore(STORE_ROOT, fs=self.base).latest_committed(verify_digests=True)
        else:
            OverwriteStore(STORE_ROOT, fs=self.base).recover()

    def _store(self, fs, hooks):
        if self.mode is Mode.ATOMIC:
            return GenerationStore(STORE_ROOT, fs=fs, hooks=hooks, keep=self.scenario.keep_k)
        return OverwriteStore(STORE_ROOT, fs=fs, hooks=hooks)

    def _checkpoint(self, fs, inst: _Instance, hooks):
        """Run one checkpoint instance of ``inst`` on ``fs``; returns (report or None on crash, crash)."""
        try:
            store = self._store(fs, hooks)
            coord = Coordinator(store, keep_k=self.scenario.keep_k, barrier_timeout=3600.0, hooks=hooks)
            last = self.scenario.m - 1
            for pid in range(self.scenario.m):
                tracker = _StaticTracker(inst.precious) if pid == last else None
                role = Role.DRIVER if pid == 0 and self.scenario.m > 1 else Role.WORKER
                coord.attach(DirectLink(_PayloadAgent(store, role, inst.images[pid], tracker)))
        except GenckptError as e:
            raise HarnessError(f"harness setup failed: {e}") from e
        except SimulatedCrash as crash:
            # store initialisation touches the filesystem too
            return None, crash
        try:
            return coord.run_checkpoint(TriggerReason.MANUAL), None
        except SimulatedCrash as crash:
            return None, crash

    def run_trial(self, hooks: FaultHooks) -> tuple[SimFS, object, SimulatedCrash | None]:
        fs = self.base.clone()
        report, crash = self._checkpoint(fs, self.new, hooks)
        return fs.crash(), report, crash

    def inject_and_verify(self, point: FaultPoint) -> Verdict:
        inj = Injector(point)
        crashed_fs, report, crash = self.run_trial(inj)
        if report is not None and report.outcome is not Outcome.COMMITTED:
            raise HarnessError(f"{point.label()}: checkpoint ended {report.outcome.value}: {report.error}")
        return self.verdict(point, crashed_fs, reached=crash is not None)

    def verdict(self, point: FaultPoint, fs: SimFS, reached: bool = True) -> Verdict:
        if self.mode is Mode.OVERWRITE:
            rec = OverwriteStore(STORE_ROOT, fs=fs).recover()
            return Verdict(point, self.mode, rec.recoverable, rec.generation, rec.mixed, reached, rec.problem)
        store = GenerationStore(STORE_ROOT, fs=fs, keep=self.scenario.keep_k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            latest = store.recover(verify_digests=True)
        if latest is None:
            return Verdict(point, self.mode, False, None, False, reached, "no valid generation")
        try:
            loaded = store.load_generation(latest, verify=True)
        except GenckptError as e:
            return Verdict(point, self.mode, False, None, False, reached, f"load failed: {e}")
        man = loaded.manifest
        images = {im.process_id: im.checksum for im in man.images}
        precious = {r.original_path: r.checksum for r in man.precious}
        matches = [
            inst for inst in (self.old, self.new)
            if images == inst.image_digests and precious == inst.precious_digests
        ]
        if matches:
            return Verdict(point, self.mode, True, latest.index, False, reached)
        # identify mixing: every item belongs to some instance but not all to one
        known = all(
            images.get(pid) in (self.old.image_digests.get(pid), self.new.image_digests.get(pid))
            for pid in images
        )
        return Verdict(point, self.mode, False, latest.index, known, reached, "manifest matches neither instance")


def inject_and_verify(point: FaultPoint, mode: Mode | str, scenario: Scenario | None = None, harness=None) -> Verdict:
    harness = harness or Harness(scenario or Scenario(), mode)
    return harness.inject_and_verify(point)


def sweep(scenario: Scenario, mode: Mode | str, points: Iterable[FaultPoint] | None = None) -> SweepSummary:
    points = enumerate_fault_points(scenario) if points is None else list(points)
    summary = SweepSummary()
    if not points:
        return summary
    harness = Harness(scenario, mode)
    for pt in points:
        summary.add(harness.inject_and_verify(pt))
    return summary


def storage_event_sweep(scenario: Scenario, mode: Mode | str, stride: int = 1) -> SweepSummary:
    """Crash before every ``stride``-th mutating filesystem operation of the second checkpoint."""
    harness = Harness(scenario, mode)
    probe = harness.base.clone()
    start = probe.events
    report, _ = harness._checkpoint(probe, harness.new, FaultHooks())
    if report is None:
        raise HarnessError("clean run crashed")
    n_events = probe.events - start
    summary = SweepSummary()
    for k in range(0, n_events, stride):
        fs = harness.base.clone()
        target = fs.events + k

        def on_event(op, path, fs=fs, target=target):
            if fs.events > target:
                raise SimulatedCrash(f"before event {k} ({op} {path})")

        fs.on_event = on_event
        _, crash = harness._checkpoint(fs, harness.new, FaultHooks())
        fs.on_event = None
        pt = FaultPoint(Location.STORAGE_EVENT, byte_offset=k)
        summary.add(harness.verdict(pt, fs.crash(), reached=crash is not None))
    return summary


CSV_FIELDS = (
    "location", "process_id", "path", "byte_offset", "trial_seed", "mode",
    "reached", "recoverable", "recovered_generation", "mixed_state_detected", "detail",
)


def verdicts_to_csv(verdicts: Iterable[Verdict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for v in verdicts:
        p = v.point
        w.writerow((
            p.location.value, "" if p.process_id is None else p.process_id, p.path or "",
            "" if p.byte_offset is None else p.byte_offset, p.trial_seed, v.mode.value,
            int(v.reached), int(v.recoverable), "" if v.recovered_generation is None else v.recovered_generation,
            int(v.mixed_state_detected), v.detail,
        ))
    return buf.getvalue()


def verdicts_from_csv(text: str) -> list[Verdict]:
    rows = csv.DictReader(io.StringIO(text))
    out = []
    for r in rows:
        pt = FaultPoint(
            Location(r["location"]),
            int(r["process_id"]) if r["process_id"] else None,
            r["path"] or None,
            int(r["byte_offset"]) if r["byte_offset"] else None,
            int(r["trial_seed"]),
        )
        out.append(Verdict(
            pt, Mode(r["mode"]), r["recoverable"] == "1",
            int(r["recovered_generation"]) if r["recovered_generation"] else None,
            r["mixed_state_detected"] == "1", r["reached"] == "1", r["detail"],
        ))
    return out
