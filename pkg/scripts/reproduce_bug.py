"""Show the mixed-generation failure of in-place overwriting, and that the atomic store avoids it.

Crashes the second checkpoint while the large worker image is half rewritten,
after the small driver image has already been replaced, then recovers.
"""

import argparse

from genckpt.faultharness import FaultPoint, Harness, Location, Mode, Scenario

MiB = 1 << 20


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--small", type=int, default=2, help="driver image, MiB")
    ap.add_argument("--large", type=int, default=300, help="worker image, MiB")
    ap.add_argument("--fraction", type=float, default=0.5, help="how far into the large image the crash lands")
    args = ap.parse_args()

    sc = Scenario(image_sizes=(args.small * MiB, args.large * MiB), n_random=0)
    point = FaultPoint(Location.DURING_IMAGE_WRITE, process_id=1, byte_offset=int(args.fraction * args.large * MiB))
    print(f"crash point: {point.label()}")
    for mode in (Mode.OVERWRITE, Mode.ATOMIC):
        v = Harness(sc, mode).inject_and_verify(point)
        state = "recoverable" if v.recoverable else "UNRECOVERABLE"
        mixed = " (images from two checkpoints)" if v.mixed_state_detected else ""
        print(f"{mode.value:>18}: {state}{mixed}; recovered generation {v.recovered_generation}  {v.detail}")


if __name__ == "__main__":
    main()
