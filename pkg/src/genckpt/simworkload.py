"""Synthetic SPAdes-like pipeline used to exercise checkpointing end to end.

A small driver process (the Python orchestrator) and a large worker (the
assembler binary) run a three-stage plan on a virtual clock.  The worker's
footprint rises and falls inside each stage, and the worker creates
``tmp_*`` files, reads them back in later stages, then deletes them.  Nothing
here does any assembly; the plan is synthetic and only mimics the shape the
case study describes.

All randomness is derived from ``(seed, tick)`` so a run is a pure function of
its seed and policy, which is what makes restart equivalence testable.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .agent import Agent, Role, SectionKind
from .bandwidth import BandwidthModel
from .coordinator import CheckpointReport, Coordinator, Outcome
from .errors import UnknownPreset
from .precious import PreciousPolicy, PreciousTracker
from .protocol import DirectLink
from .scheduler import (
    CkptPolicyCfg,
    Scheduler,
    TelemetrySample,
    TriggerReason,
    TriggerState,
    estimate_checkpoint_duration,
)

# Desk scaling.  With the default divisor the largest dataset maps to a
# ~300 MiB worker image and ~200 MiB of precious files.
WORKER_BYTES_PER_BASE = 11.0
PRECIOUS_BYTES_PER_BASE = 7.4
DRIVER_RATIO = 0.01
DEFAULT_SCALE_DIVISOR = 1000.0
TICK_SECONDS = 60.0
MUTATE_WINDOW = 4096

# name -> (read count in millions, base count in billions)
TABLE_I = {
    "bog": (31.1, 4.5),
    "spikein": (78.7, 11.8),
    "rhizosphere": (193.0, 28.5),
}

OUTPUT_FILES = ("contigs.txt", "assembly_stats.json")


@dataclass(frozen=True)
class TempFileSpec:
    """A temp file created ``create_at`` seconds into its stage; ``delete_at`` uses the same origin."""

    name: str
    size: int
    create_at: float
    delete_at: float | None = None

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("temp file size must be non-negative")
        if self.delete_at is not None and not self.delete_at > self.create_at:
            raise ValueError(f"{self.name}: delete_at must be after create_at")


@dataclass(frozen=True)
class PipelineStage:
    label: str
    duration: float
    footprint_bytes: int
    temp_files: tuple[TempFileSpec, ...] = ()

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("stage duration must be positive")


@dataclass(frozen=True)
class WorkloadPreset:
    name: str
    read_count_millions: float
    base_count_billions: float
    scale_divisor: float = DEFAULT_SCALE_DIVISOR
    stage_plan: tuple[PipelineStage, ...] = ()

    def __post_init__(self):
        if not self.scale_divisor > 0:
            raise ValueError("scale_divisor must be positive")

    @property
    def bases(self) -> float:
        return self.base_count_billions * 1e9

    @property
    def worker_footprint(self) -> int:
        return int(self.bases * WORKER_BYTES_PER_BASE / self.scale_divisor)

    @property
    def precious_total(self) -> int:
        return int(self.bases * PRECIOUS_BYTES_PER_BASE / self.scale_divisor)

    @property
    def driver_footprint(self) -> int:
        return int(self.worker_footprint * DRIVER_RATIO)

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.stage_plan)


def default_stage_plan(worker_footprint: int, precious_total: int) -> tuple[PipelineStage, ...]:
    """Synthetic plan: peaks in kmer_count and graph_build, a smaller simplify stage.

    Ten temp files of one tenth of the precious total each.  k-mer tables are
    read and deleted during graph_build, graph fragments during simplify, and
    the last two files are never deleted.
    """
    part = precious_total // 10
    kmer = tuple(
        TempFileSpec(f"tmp_kmer_{i}.bin", part, 120 + 240 * i, 1200 + 300 + 250 * i) for i in range(4)
    )
    graph_deletes = (1800, 2100, 2250, 2400)
    graph = tuple(
        TempFileSpec(f"tmp_graph_{i}.bin", part, 200 + 300 * i, graph_deletes[i]) for i in range(4)
    )
    simplify = tuple(TempFileSpec(f"tmp_simplify_{i}.bin", part, 180 + 300 * i) for i in range(2))
    return (
        PipelineStage("kmer_count", 1200.0, int(worker_footprint * 0.9), kmer),
        PipelineStage("graph_build", 1500.0, worker_footprint, graph),
        PipelineStage("simplify", 900.0, int(worker_footprint * 0.5), simplify),
    )


def load_preset(name: str, scale_divisor: float = DEFAULT_SCALE_DIVISOR) -> WorkloadPreset:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in TABLE_I:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(TABLE_I)}")
    reads, bases = TABLE_I[key]
    base = WorkloadPreset(key, reads, bases, scale_divisor)
    return WorkloadPreset(
        key, reads, bases, scale_divisor, default_stage_plan(base.worker_footprint, base.precious_total)
    )


def footprint_at(preset: WorkloadPreset, t: float) -> tuple[str, int]:
    """(stage label, worker footprint) at job time ``t``; troughs sit at stage boundaries."""
    start = 0.0
    for stage in preset.stage_plan:
        end = start + stage.duration
        if t <= end or stage is preset.stage_plan[-1]:
            frac = min(1.0, max(0.0, (t - start) / stage.duration))
            return stage.label, int(stage.footprint_bytes * (0.4 + 0.6 * math.sin(math.pi * frac)))
        start = end
    return "", 0


def temp_events(preset: WorkloadPreset) -> list[tuple[float, int, str, int, TempFileSpec]]:
    """Absolute-time create/delete events, ordered by (time, create-before-delete, file id)."""
    events = []
    start = 0.0
    fid = 0
    for stage in preset.stage_plan:
        for spec in stage.temp_files:
            events.append((start + spec.create_at, 0, "create", fid, spec))
            if spec.delete_at is not None:
                events.append((start + spec.delete_at, 1, "delete", fid, spec))
            fid += 1
        start += stage.duration
    events.sort(key=lambda e: (e[0], e[1], e[3]))
    return events


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def temp_file_content(seed: int, fid: int, size: int) -> bytes:
    return _rng(seed, 1 << 20, fid).bytes(size)


# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    preset: str
    seed: int
    telemetry: list[TelemetrySample] = field(default_factory=list)
    reports: list[CheckpointReport] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    killed: bool = False
    last_tick: int = 0
    restored_from: int | None = None

    @property
    def committed(self) -> list[CheckpointReport]:
        return [r for r in self.reports if r.outcome is Outcome.COMMITTED]

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "killed": self.killed,
            "last_tick": self.last_tick,
            "restored_from": self.restored_from,
            "outputs": self.outputs,
            "reports": [r.to_dict() for r in self.reports],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            d["preset"], d["seed"],
            reports=[CheckpointReport.from_dict(r) for r in d["reports"]],
            outputs=dict(d.get("outputs", {})),
            killed=d.get("killed", False),
            last_tick=d.get("last_tick", 0),
            restored_from=d.get("restored_from"),
        )


class Pipeline:
    """Driver + worker agents wired to one coordinator and store.

    ``workdir`` is the worker's working directory on the real filesystem; its
    ``tmp_*`` files are the precious set unless ``precious_policy`` says otherwise.  ``store`` may sit on a ``SimFS``
    (virtual clock) or the real filesystem.
    """

    def __init__(
        self,
        preset: WorkloadPreset,
        store,
        workdir: str,
        policy: CkptPolicyCfg,
        seed: int = 0,
        tick_seconds: float = TICK_SECONDS,
        ckpt_enabled: bool = True,
        bandwidth: BandwidthModel | None = None,
        keep_k: int | None = None,
        link_factory=DirectLink,
        precious_policy: PreciousPolicy | None = None,
    ):
        self.preset = preset
        self.store = store
        self.policy = policy
        self.seed = seed
        self.tick_seconds = tick_seconds
        self.bandwidth = bandwidth
        if precious_policy is None:
            precious_policy = PreciousPolicy.from_flags(prefixes=("tmp_",), ckpt_enable=ckpt_enabled)
        self.tracker = PreciousTracker(workdir, precious_policy)
        self.events = temp_events(preset)
        self.n_ticks = max(1, math.ceil(preset.duration / tick_seconds - 1e-9))

        self.driver = Agent(store, Role.DRIVER, preset.driver_footprint)
        self.worker = Agent(store, Role.WORKER, preset.worker_footprint, tracker=self.tracker)
        self.driver.register_section("driver_state", b"{}", SectionKind.METADATA)
        self.driver.register_section("driver_heap", _rng(seed, 0).bytes(preset.driver_footprint))
        self.worker.register_section("worker_state", b"{}", SectionKind.METADATA)
        self.worker.register_section("heap", bytearray())
        self.worker.on_restore = _thaw_heap

        self.coordinator = Coordinator(store, keep_k=keep_k, bandwidth=bandwidth)
        self.coordinator.attach(link_factory(self.driver))
        self.coordinator.attach(link_factory(self.worker))

        self.tick = 0
        self.acc = hashlib.sha256(f"genckpt-sim/{preset.name}/{seed}".encode()).digest()
        self.scheduler = Scheduler(policy, self._estimator)

    # -- state <-> sections ----------------------------------------------
    def _sync_sections(self) -> None:
        self.driver.set_section(
            "driver_state",
            json.dumps({"tick": self.tick, "scheduler": self.scheduler.state.to_dict()}, sort_keys=True).encode(),
        )
        self.worker.set_section("worker_state", json.dumps({"tick": self.tick, "acc": self.acc.hex()}).encode())

    def _load_sections(self) -> None:
        d = json.loads(self.driver.section("driver_state"))
        w = json.loads(self.worker.section("worker_state"))
        if d["tick"] != w["tick"]:
            raise RuntimeError(f"driver at tick {d['tick']} but worker at tick {w['tick']}")
        self.tick = w["tick"]
        self.acc = bytes.fromhex(w["acc"])
        self.scheduler = Scheduler(self.policy, self._estimator, TriggerState.from_dict(d["scheduler"]))

    @property
    def _estimator(self):
        if self.bandwidth is None:
            return None
        return lambda sample: estimate_checkpoint_duration(sample.cost(), self.bandwidth, self.policy.percentile)

    @property
    def heap(self) -> bytearray:
        return self.worker.section("heap")

    # -- simulation ------------------------------------------------------
    def _step(self) -> TelemetrySample:
        k = self.tick + 1
        t0, t1 = self.tick * self.tick_seconds, k * self.tick_seconds
        rng = _rng(self.seed, k)
        label, target = footprint_at(self.preset, t1)
        heap = self.heap
        if target < len(heap):
            del heap[target:]
        elif target > len(heap):
            heap += rng.bytes(target - len(heap))
        if heap:
            off = int(rng.integers(0, len(heap)))
            w = min(MUTATE_WINDOW, len(heap) - off)
            heap[off : off + w] = rng.bytes(w)
            self.acc = hashlib.sha256(self.acc + off.to_bytes(8, "big") + heap[off : off + w]).digest()
        for when, _, kind, fid, spec in self.events:
            if not t0 < when <= t1:
                continue
            if kind == "create":
                self.tracker.write(spec.name, temp_file_content(self.seed, fid, spec.size))
            else:
                data = self.tracker.read(spec.name)
                self.acc = hashlib.sha256(self.acc + hashlib.sha256(data).digest()).digest()
                self.tracker.unlink(spec.name)
        self.tick = k
        footprint = self.driver.footprint_estimate() + self.worker.footprint_estimate()
        return TelemetrySample(t1, footprint, self.tracker.precious_bytes(), label)

    def _write_outputs(self) -> dict[str, str]:
        contigs = f"acc {self.acc.hex()}\nheap {hashlib.sha256(self.heap).hexdigest()}\n".encode()
        stats = json.dumps(
            {"preset": self.preset.name, "ticks": self.tick, "heap_bytes": len(self.heap)}, sort_keys=True
        ).encode()
        outputs = {}
        for name, data in zip(OUTPUT_FILES, (contigs, stats)):
            self.tracker.write(name, data)
            outputs[name] = hashlib.sha256(data).hexdigest()
        return outputs

    def run(
        self,
        kill_at_tick: int | None = None,
        resume_from: int | str | None = None,
        checkpoint_at_tick: int | None = None,
    ) -> RunRecord:
        """Run to completion, or until ``kill_at_tick`` (then return without cleanup).

        ``resume_from`` is a generation index or ``"latest"``; the pipeline is
        first restored from it and continues from the tick it recorded.
        ``checkpoint_at_tick`` takes a manual checkpoint after that tick and
        stops, which is how a chain of batch jobs hands work to the next one.
        """
        record = RunRecord(self.preset.name, self.seed)
        if resume_from is not None:
            rr = self.coordinator.run_restore(None if resume_from == "latest" else resume_from)
            self._load_sections()
            record.restored_from = rr.generation.index
        while self.tick < self.n_ticks:
            sample = self._step()
            record.telemetry.append(sample)
            decision = self.scheduler.feed(sample)
            # a checkpoint on the final tick would only precede the outputs
            took = decision.checkpoint and self.tick < self.n_ticks
            if took:
                self._sync_sections()
                record.reports.append(self.coordinator.run_checkpoint(decision.reason))
            if checkpoint_at_tick is not None and self.tick >= checkpoint_at_tick:
                if not took:
                    self._sync_sections()
                    record.reports.append(self.coordinator.run_checkpoint(TriggerReason.MANUAL))
                record.killed = True
                record.last_tick = self.tick
                return record
            if kill_at_tick is not None and self.tick >= kill_at_tick:
                record.killed = True
                record.last_tick = self.tick
                return record
        record.outputs = self._write_outputs()
        record.last_tick = self.tick
        return record


def _thaw_heap(agent: Agent) -> None:
    # restored sections are immutable bytes; the worker mutates its heap in place
    agent.set_section("heap", bytearray(agent.section("heap")))


def run_pipeline(
    preset: WorkloadPreset | str,
    store,
    workdir: str,
    policy: CkptPolicyCfg,
    seed: int = 0,
    kill_at_tick: int | None = None,
    resume_from: int | str | None = None,
    checkpoint_at_tick: int | None = None,
    **kwargs,
) -> RunRecord:
    if isinstance(preset, str):
        preset = load_preset(preset)
    pipe = Pipeline(preset, store, workdir, policy, seed=seed, **kwargs)
    return pipe.run(kill_at_tick=kill_at_tick, resume_from=resume_from, checkpoint_at_tick=checkpoint_at_tick)


def output_digests(workdir: str) -> dict[str, str]:
    out = {}
    for name in OUTPUT_FILES:
        path = os.path.join(workdir, name)
        if os.path.exists(path):
            with open(path, "rb") as f:
                out[name] = hashlib.sha256(f.read()).hexdigest()
    return out
