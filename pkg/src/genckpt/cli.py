"""Command-line entry point: ``genckpt <command> ...``.

Exit status: 0 on success, 1 on an operational failure, 2 on a usage error.
The store location defaults to ``$GENCKPT_STORE``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, replace

from .config import load_config
from .errors import GenckptError
from .faultharness import Mode, Scenario, enumerate_fault_points, sweep, verdicts_to_csv
from .fs import SimFS
from .precious import PreciousPolicy
from .scheduler import telemetry_to_csv
from .simworkload import Pipeline, RunRecord, load_preset
from .store import GenerationStore

log = logging.getLogger("genckpt")


@dataclass(frozen=True)
class ReportRow:
    checkpoint_index: int
    precious_seconds: float
    image_seconds: float
    precious_bytes: int
    image_bytes: int

    def __post_init__(self):
        if self.precious_seconds < 0 or self.image_seconds < 0:
            raise ValueError("durations must be non-negative")


REPORT_FIELDS = ("checkpoint_index", "precious_seconds", "image_seconds", "precious_bytes", "image_bytes")


def report_rows(record: RunRecord) -> list[ReportRow]:
    """One row per committed checkpoint, numbered from 1."""
    return [
        ReportRow(i, r.precious_duration, r.image_duration, r.precious_bytes, r.image_bytes)
        for i, r in enumerate(record.committed, start=1)
    ]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow((r.checkpoint_index, repr(r.precious_seconds), repr(r.image_seconds), r.precious_bytes, r.image_bytes))
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ReportRow]:
    return [
        ReportRow(int(r["checkpoint_index"]), float(r["precious_seconds"]), float(r["image_seconds"]),
                  int(r["precious_bytes"]), int(r["image_bytes"]))
        for r in csv.DictReader(io.StringIO(text))
    ]


def render_table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(rows) -> str:
    return render_table(
        ("ckpt", "precious_s", "image_s", "precious_MiB", "image_MiB"),
        [
            (r.checkpoint_index, f"{r.precious_seconds:.4f}", f"{r.image_seconds:.4f}",
             f"{r.precious_bytes / 2**20:.2f}", f"{r.image_bytes / 2**20:.2f}")
            for r in rows
        ],
    )


# ---------------------------------------------------------------------------


def _store_root(args) -> str:
    root = args.store or os.environ.get("GENCKPT_STORE")
    if not root:
        raise UsageError("no store given (use --store or set GENCKPT_STORE)")
    return root


class UsageError(Exception):
    pass


def _precious_policy(args, cfg) -> PreciousPolicy:
    """Command-line precious flags replace the config file's [precious] section."""
    pol = cfg.precious
    if not (args.precious_prefix or args.precious_dir or args.ckpt_enable is not None):
        return pol
    ckpt = pol.ckpt_enabled if args.ckpt_enable is None else args.ckpt_enable
    if not (args.precious_prefix or args.precious_dir):
        return replace(pol, ckpt_enabled=ckpt)
    return PreciousPolicy.from_flags(
        prefixes=tuple(args.precious_prefix or ()), precious_dir=args.precious_dir, ckpt_enable=ckpt
    )


def _pipeline(args, store, cfg, bandwidth=None) -> Pipeline:
    preset = load_preset(args.preset, args.scale_divisor)
    return Pipeline(
        preset, store, args.workdir, cfg.policy, seed=args.seed, keep_k=cfg.keep_k,
        bandwidth=bandwidth, precious_policy=_precious_policy(args, cfg),
    )


def _resume_arg(text):
    if text is None or text == "latest":
        return text
    return int(text)


def _emit_record(args, record: RunRecord) -> None:
    if args.record:
        with open(args.record, "w", encoding="utf-8") as f:
            json.dump(record.to_dict(), f, indent=1)
    if args.telemetry:
        with open(args.telemetry, "w", encoding="utf-8") as f:
            f.write(telemetry_to_csv(record.telemetry))
    rows = report_rows(record)
    if args.csv:
        sys.stdout.write(rows_to_csv(rows))
    else:
        print(render_report(rows))
        state = "stopped" if record.killed else "finished"
        print(f"{state} at tick {record.last_tick}; {len(record.committed)} checkpoints committed")
        for name, digest in sorted(record.outputs.items()):
            print(f"output {name} {digest}")


def cmd_run(args) -> int:
    cfg = load_config(args.policy)
    store = GenerationStore(_store_root(args), keep=cfg.keep_k)
    pipe = _pipeline(args, store, cfg, cfg.bandwidth)
    record = pipe.run(kill_at_tick=args.stop_at_tick, resume_from=_resume_arg(args.resume))
    _emit_record(args, record)
    return 0


def cmd_checkpoint(args) -> int:
    cfg = load_config(args.policy)
    store = GenerationStore(_store_root(args), keep=cfg.keep_k)
    pipe = _pipeline(args, store, cfg, cfg.bandwidth)
    record = pipe.run(resume_from=_resume_arg(args.resume), checkpoint_at_tick=args.tick)
    if not record.reports or record.reports[-1].outcome.value != "committed":
        err = record.reports[-1].error if record.reports else "no checkpoint taken"
        print(f"checkpoint failed: {err}", file=sys.stderr)
        return 1
    last = record.reports[-1]
    print(f"committed generation {last.generation.index} at tick {record.last_tick} ({last.trigger.value})")
    return 0


def cmd_restore(args) -> int:
    cfg = load_config(args.policy)
    store = GenerationStore(_store_root(args), keep=cfg.keep_k)
    pipe = _pipeline(args, store, cfg)
    gen = None if args.gen in (None, "latest") else int(args.gen)
    rr = pipe.coordinator.run_restore(gen)
    print(f"restored generation {rr.generation.index}")
    for path in rr.restored_paths:
        mark = " (overwrote existing file)" if path in rr.overwritten else ""
        print(f"  precious {path}{mark}")
    for pid, digest in sorted(rr.image_digests.items()):
        print(f"  process {pid} image {digest}")
    return 0


def cmd_inspect(args) -> int:
    root = _store_root(args)
    if not os.path.isdir(root):
        print(f"no store at {root}", file=sys.stderr)
        return 1
    store = GenerationStore(root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        infos = store.scan(verify_digests=args.verify)
        latest = store.latest_committed(verify_digests=args.verify)
    rows = []
    for info in infos:
        m = info.manifest
        rows.append((
            info.index,
            "yes" if info.valid else "no",
            "*" if latest is not None and info.index == latest.index else "",
            m.process_count if m else "",
            m.total_bytes if m else "",
            len(m.precious) if m else "",
            info.problem,
        ))
    header = ("generation", "valid", "latest", "processes", "total_bytes", "precious_files", "problem")
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        print(render_table(header, rows) if rows else "store is empty")
    return 0


def cmd_faultsweep(args) -> int:
    scenario = Scenario.from_file(args.scenario) if args.scenario else Scenario()
    overrides = {}
    if args.random is not None:
        overrides["n_random"] = args.random
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        scenario = Scenario(**{**scenario.__dict__, **overrides})
    mode = Mode.parse(args.mode)
    points = enumerate_fault_points(scenario)
    summary = sweep(scenario, mode, points)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(verdicts_to_csv(summary.verdicts))
    print(f"mode={mode.value} total={summary.total} recoverable={summary.recoverable_count} "
          f"mixed={summary.mixed_count} failures={len(summary.failures)}")
    for v in summary.failures[: args.show]:
        print(f"  {v.point.label()}: {v.detail or 'mixed state'}")
    if mode is Mode.ATOMIC and summary.failures:
        return 1
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.policy)
    fs = SimFS(bandwidth=cfg.bandwidth)
    store = GenerationStore("/bench", fs=fs, keep=cfg.keep_k)
    with tempfile.TemporaryDirectory(prefix="genckpt-bench-") as tmp:
        args.workdir = args.workdir or tmp
        record = _pipeline(args, store, cfg, cfg.bandwidth).run()
    _emit_record(args, record)
    return 0


def cmd_report(args) -> int:
    with open(args.record, encoding="utf-8") as f:
        record = RunRecord.from_dict(json.load(f))
    rows = report_rows(record)
    sys.stdout.write(rows_to_csv(rows) if args.csv else render_report(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genckpt", description="Generation-based checkpoint/restart toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def workload(sp, workdir_required=True):
        sp.add_argument("--preset", default="bog")
        sp.add_argument("--policy", help="policy config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--scale-divisor", type=float, default=1000.0)
        sp.add_argument("--workdir", required=workdir_required, help="application working directory")
        sp.add_argument("--precious-prefix", action="append", help="file-name prefix marking precious files (repeatable)")
        sp.add_argument("--precious-dir", help="directory whose contents are precious")
        sp.add_argument("--ckpt-enable", action=argparse.BooleanOptionalAction, default=None,
                        help="retain deleted precious files for the next checkpoint")

    def outputs(sp):
        sp.add_argument("--record", help="write the run record (JSON) here")
        sp.add_argument("--telemetry", help="write telemetry CSV here")
        sp.add_argument("--csv", action="store_true", help="print the report as CSV")

    sp = sub.add_parser("run", help="run a workload under checkpointing on a real store")
    sp.add_argument("--store")
    workload(sp)
    outputs(sp)
    sp.add_argument("--resume", help="generation index or 'latest'")
    sp.add_argument("--stop-at-tick", type=int, help="stop abruptly after this tick")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("checkpoint", help="advance a workload to a tick, checkpoint it, and stop")
    sp.add_argument("--store")
    workload(sp)
    sp.add_argument("--tick", type=int, required=True)
    sp.add_argument("--resume", help="generation index or 'latest'")
    sp.set_defaults(func=cmd_checkpoint)

    sp = sub.add_parser("restore", help="restore precious files and process images")
    sp.add_argument("--store")
    workload(sp)
    sp.add_argument("--gen", default="latest")
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("inspect", help="list generations in a store")
    sp.add_argument("--store")
    sp.add_argument("--verify", action="store_true", help="also check payload digests")
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("faultsweep", help="crash-injection sweep on a simulated filesystem")
    sp.add_argument("--mode", choices=("atomic", "overwrite", "atomic_commit", "overwrite_in_place"), default="atomic")
    sp.add_argument("--scenario", help="scenario INI file")
    sp.add_argument("--random", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--csv", help="write per-point verdicts here")
    sp.add_argument("--show", type=int, default=10, help="failures to list")
    sp.set_defaults(func=cmd_faultsweep)

    sp = sub.add_parser("bench", help="run a workload on the simulated filesystem and report checkpoint times")
    workload(sp, workdir_required=False)
    outputs(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="render the checkpoint-time table from a run record")
    sp.add_argument("--record", required=True)
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (GenckptError, OSError, ValueError) as e:
        print(f"genckpt: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
