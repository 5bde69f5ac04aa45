#!/usr/bin/env python3
"""Run every pipeline stage over a demo corpus and print the reports.

Generates the corpus if the directory does not exist yet, then drives the
CLI end to end: split, distill, decide, reflect, build-datasets, train-rm,
train-policy, evaluate, paths, stats, sweep.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from factdesk.backend import default_template_dir, load_templates
from factdesk.cli import main as cli_main
from factdesk.synth import write_demo_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus", default="demo_corpus", help="corpus directory")
    parser.add_argument("--out", default=None, help="output directory (default <corpus>/out)")
    parser.add_argument("--instances", type=int, default=10)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    corpus = Path(args.corpus)
    if not (corpus / "run.cfg").exists():
        templates = load_templates(default_template_dir())
        write_demo_corpus(corpus, templates, n_instances=args.instances, seed=args.seed)
        print(f"generated demo corpus in {corpus}")

    cfg = str(corpus / "run.cfg")
    out = str(Path(args.out) if args.out else corpus / "out")
    stages = [
        ["split", "--config", cfg, "--out", out],
        ["distill", "--config", cfg, "--transcripts", f"{out}/train.jsonl", "--out", out],
        ["decide", "--config", cfg, "--tables", f"{out}/tables.jsonl", "--out", out],
        ["reflect", "--config", cfg, "--tables", f"{out}/tables.jsonl",
         "--labels", f"{out}/train.jsonl", "--out", out],
        ["build-datasets", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
        ["train-rm", "--config", cfg, "--comparisons", f"{out}/comparisons.jsonl", "--out", out],
        ["train-policy", "--config", cfg, "--demos", f"{out}/demonstrations.jsonl",
         "--rm", f"{out}/reward_model.txt", "--out", out],
        ["evaluate", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
        ["paths", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
        ["stats", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
        ["sweep", "--config", cfg, "--tables", f"{out}/tables.jsonl",
         "--labels", f"{out}/train.jsonl", "--out", out],
    ]
    for stage in stages:
        print(f"$ factdesk {' '.join(stage)}")
        code = cli_main(stage)
        if code != 0:
            return code

    for report in ("metrics.txt", "paths.txt", "fact_stats.txt", "sweep.txt"):
        path = Path(out) / report
        print(f"\n--- {report} ---")
        print(path.read_text().rstrip())
    return 0


if __name__ == "__main__":
    sys.exit(main())
