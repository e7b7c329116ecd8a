#!/usr/bin/env python3
"""
Synthetic dataset script for sampletag
Writes a tagged toy dataset (audio files + manifest.csv) that train/eval/analyze accept.
The same seed always produces byte-identical files.

Usage: python scripts/make_synth.py OUT_DIR [SONGS] [TAGS] [SEED]
"""

import sys

from sampletag.config import DESK_INPUT_LEN, Config
from sampletag.data import export_dataset, synth_generate
from sampletag.errors import SampletagError
from sampletag.utils import configure_logging

INPUT_LEN = DESK_INPUT_LEN
SEGMENTS_PER_SONG = 2


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print(__doc__.strip().splitlines()[-1])
        return 1
    out_dir = argv[0]
    try:
        songs = int(argv[1]) if len(argv) > 1 else 200
        tags = int(argv[2]) if len(argv) > 2 else 8
        seed = int(argv[3]) if len(argv) > 3 else Config.DEFAULT_SEED
    except ValueError as e:
        print(f"Invalid number: {e}")
        return 1

    configure_logging()
    print(f"Generating {songs} songs with {tags} tags (seed {seed})...")
    try:
        dataset = synth_generate(songs, tags, INPUT_LEN, seed, segments_per_song=SEGMENTS_PER_SONG)
        manifest = export_dataset(dataset, out_dir)
    except SampletagError as e:
        print(f"Synthetic dataset generation failed: {e}")
        return e.exit_code

    print(f"Manifest written to {manifest}")
    for signature in dataset.signatures:
        low, high = signature.band
        print(f"  {signature.name:<18} {low:8.1f} - {high:8.1f} Hz")
    return 0


if __name__ == "__main__":
    exit(main())
