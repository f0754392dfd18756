#!/usr/bin/env python3
"""Render a probe-export CSV (T x 512 log magnitudes) as a portable graymap.

Usage: python scripts/spectrogram_to_pgm.py probes/block_07.csv [out.pgm]

Only the lower spectral half is drawn (the upper bins mirror it), with time
on the horizontal axis and frequency increasing upward.
"""

import sys
from pathlib import Path

import numpy as np


def main(argv):
    if not 2 <= len(argv) <= 3:
        print(__doc__, file=sys.stderr)
        return 1
    src = Path(argv[1])
    dst = Path(argv[2]) if len(argv) == 3 else src.with_suffix(".pgm")

    frames = np.loadtxt(src, delimiter=",")
    if frames.ndim != 2:
        print(f"{src}: expected a 2-D CSV", file=sys.stderr)
        return 1
    half = frames[:, : frames.shape[1] // 2 + 1]

    lo, hi = np.percentile(half, 1.0), np.percentile(half, 99.5)
    scaled = np.clip((half - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    image = np.flipud((scaled * 255).astype(np.uint8).T)

    with open(dst, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())
    print(f"wrote {dst} ({image.shape[1]}x{image.shape[0]})")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
