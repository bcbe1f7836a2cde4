"""Per-checkpoint precious and image cost for the bog preset (growth of precious files over a run)."""

import argparse
import tempfile

from genckpt.bandwidth import BandwidthModel, ConstantCongestion
from genckpt.cli import render_report, report_rows, rows_to_csv
from genckpt.fs import SimFS
from genckpt.scheduler import CkptPolicyCfg
from genckpt.simworkload import load_preset, run_pipeline
from genckpt.store import GenerationStore

GiB = 1 << 30


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="bog")
    ap.add_argument("--scale-divisor", type=float, default=1000.0)
    ap.add_argument("--rate", type=float, default=1.5, help="store bandwidth, GiB/s")
    ap.add_argument("--period", type=float, default=600.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", action="store_true")
    args = ap.parse_args()

    fs = SimFS(bandwidth=BandwidthModel(args.rate * GiB, ConstantCongestion(1.0)))
    store = GenerationStore("/bench", fs=fs)
    with tempfile.TemporaryDirectory() as work:
        rec = run_pipeline(
            load_preset(args.preset, args.scale_divisor), store, work,
            CkptPolicyCfg(mode="periodic", period=args.period), seed=args.seed,
        )
    rows = report_rows(rec)
    print(rows_to_csv(rows) if args.csv else render_report(rows), end="" if args.csv else "\n")
    grows = all(a.precious_bytes <= b.precious_bytes for a, b in zip(rows, rows[1:]))
    if not args.csv:
        print(f"precious bytes non-decreasing: {grows}")


if __name__ == "__main__":
    main()
