#!/usr/bin/env python3
"""
Checkpoint inspection script
Lists the model config, the tag vocabulary and every tensor stored in a checkpoint.

Usage: python scripts/inspect_checkpoint.py CHECKPOINT [--tensors]
"""

import os
import sys

from sampletag.checkpoint import inspect_checkpoint
from sampletag.errors import SampletagError
from sampletag.utils import format_file_size


def describe(path, show_tensors=False):
    """Return the report lines for one checkpoint"""
    header, rows = inspect_checkpoint(path)
    model = header['model']
    lines = [
        f"Checkpoint: {path} ({format_file_size(os.path.getsize(path))})",
        f"  block kind: {model['block_kind']}  depth: {model['depth']}  input: {model['input_len']}",
        f"  multi-level: {model['multi_level']}  alpha: {model['alpha']}",
        f"  tags ({len(header.get('tags') or [])}): {', '.join(header.get('tags') or [])}",
        f"  tensors: {len(rows)}  values: {sum(r['size'] for r in rows)}",
    ]
    if show_tensors:
        width = max(len(r['name']) for r in rows)
        for r in rows:
            lines.append(f"    {r['name']:<{width}}  {str(r['shape']):<18} {r['size']}")
    return lines


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    paths = [a for a in argv if not a.startswith('--')]
    if len(paths) != 1:
        print(__doc__.strip().splitlines()[-1])
        return 1
    try:
        for line in describe(paths[0], show_tensors='--tensors' in argv):
            print(line)
    except SampletagError as e:
        print(f"Cannot read checkpoint: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    exit(main())
