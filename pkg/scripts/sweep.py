"""Run the crash-injection sweep in both modes and print a side-by-side summary."""

import argparse
import time

from genckpt.faultharness import Mode, Scenario, enumerate_fault_points, storage_event_sweep, sweep, verdicts_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", help="scenario INI file (default: 2 MiB + 300 MiB images, 10 x 20 MiB precious)")
    ap.add_argument("--random", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", default="atomic,overwrite")
    ap.add_argument("--events", action="store_true", help="crash before every filesystem operation instead")
    ap.add_argument("--csv-prefix", help="write <prefix>-<mode>.csv per mode")
    args = ap.parse_args()

    base = Scenario.from_file(args.scenario) if args.scenario else Scenario()
    sc = Scenario(**{**base.__dict__, "n_random": args.random, "seed": args.seed})
    for name in args.modes.split(","):
        mode = Mode.parse(name)
        start = time.monotonic()
        if args.events:
            s = storage_event_sweep(sc, mode)
        else:
            s = sweep(sc, mode, enumerate_fault_points(sc))
        print(f"{mode.value:>18}: {s.recoverable_count}/{s.total} recoverable, {s.mixed_count} mixed, "
              f"{time.monotonic() - start:.1f} s")
        if args.csv_prefix:
            with open(f"{args.csv_prefix}-{mode.value}.csv", "w", encoding="utf-8") as f:
                f.write(verdicts_to_csv(s.verdicts))


if __name__ == "__main__":
    main()
