#!/usr/bin/env python3
"""Write a grid of rendered nodules as PGM files for visual inspection."""
import sys
from pathlib import Path

from collidernet import images


def main(out: str = "samples") -> int:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for x in (-2, -1, 0, 1, 2):
        for z in (-2, 0, 2):
            img = images.render_nodule(x, z, rng_seed=7)
            images.to_pgm(img.pixels, d / f"nodule_x{x:+d}_z{z:+d}.pgm")
            print(f"x={x:+d} z={z:+d}  measured x'={img.meas_x:+.2f} z'={img.meas_z:+.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
