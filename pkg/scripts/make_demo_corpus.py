#!/usr/bin/env python3
"""Generate a self-contained offline demo corpus.

Writes transcripts, prices, metric histories, a scripted backend covering
every pipeline prompt (all three sweep ranges included), and a ready-to-use
run config into the target directory.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from factdesk.backend import default_template_dir, load_templates
from factdesk.synth import write_demo_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_corpus", help="target directory")
    parser.add_argument("--instances", type=int, default=10, help="training instances (max 11)")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    templates = load_templates(default_template_dir())
    paths = write_demo_corpus(Path(args.out), templates, n_instances=args.instances, seed=args.seed)
    for name, path in paths.items():
        print(f"{name:12s} {path}")
    print(f"\nnext: factdesk split --config {paths['config']} --out {Path(args.out) / 'out'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
