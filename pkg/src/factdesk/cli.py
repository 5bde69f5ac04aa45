"""Pipeline command-line interface.

Composable subcommands over a shared flat key-value config: split, distill,
decide, reflect, build-datasets, train-rm, train-policy, evaluate, paths,
stats, sweep. Every stage reads and writes only declared files, stamps the
seed and config hash into a manifest, and removes partial outputs on failure.
Outputs contain no timestamps or absolute paths, so a rerun with the same
inputs, seed, and script is byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from contextlib import suppress
from pathlib import Path
from typing import Sequence

from . import corpus as corpus_mod
from .backend import (
    LlmBackend,
    RemoteBackend,
    RemoteConfig,
    ScriptedBackend,
    load_templates,
)
from .config import ConfigError, RunConfig, load_run_config
from .corpus import read_jsonl, write_jsonl
from .evaluation import (
    DEFAULT_SWEEP_RANGES,
    confusion_by_round,
    macro_metrics,
    mine_paths,
    sweep_fact_ranges,
)
from .explanation import ExplanationWarning, fact_statistics, parse_explanation, render_explanation
from .facttable import (
    MetricKind,
    classify_metrics,
    distill,
    parse_fact_table,
    table_from_record,
    table_to_record,
)
from .learn import (
    fit_reward,
    fit_sft,
    load_reward_model,
    optimize_policy,
    save_policy,
    save_reward_model,
)
from .reflect import (
    ComparisonPair,
    Demonstration,
    build_datasets,
    comparison_to_record,
    decide_once,
    demonstration_to_record,
    run_traces,
    trace_from_record,
    trace_to_record,
)


class StageOutputs:
    """Tracks a stage's output files; removes them if the stage fails."""

    def __init__(self, name: str, out_dir: Path, config: RunConfig):
        self.name = name
        self.dir = out_dir
        self.config = config
        self.created: list[Path] = []
        self.counts: dict[str, int] = {}
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, filename: str) -> Path:
        p = self.dir / filename
        self.created.append(p)
        return p

    def write_manifest(self, **parameters) -> None:
        manifest = {
            "stage": self.name,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash,
            "counts": self.counts,
            "outputs": sorted(p.name for p in self.created),
            "parameters": parameters,
        }
        self.path(f"{self.name}.manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    def __enter__(self) -> "StageOutputs":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            for p in self.created:
                with suppress(OSError):
                    p.unlink()
        return False


def _make_backend(config: RunConfig) -> LlmBackend:
    if config.backend == "scripted":
        if config.script is None:
            raise ConfigError("scripted backend requires a script path (script= or --backend scripted:<path>)")
        return ScriptedBackend.from_file(config.script)
    if not config.remote_endpoint or not config.remote_model:
        raise ConfigError("remote backend requires remote_endpoint and remote_model in the config")
    return RemoteBackend(
        RemoteConfig(
            endpoint=config.remote_endpoint,
            model=config.remote_model,
            api_key_env=config.remote_api_key_env,
            temperature=config.temperature,
            timeout_s=config.remote_timeout,
            max_attempts=config.remote_max_attempts,
            max_in_flight=config.remote_max_in_flight,
        )
    )


def _write_audit(backend: LlmBackend, path: str | None) -> None:
    if path is None:
        return
    if isinstance(backend, RemoteBackend):
        backend.write_audit(path)
    elif isinstance(backend, ScriptedBackend):
        Path(path).write_text("\n".join(backend.calls) + "\n", encoding="utf-8")


def _load_tables(path: str | Path) -> list[tuple[str, object]]:
    records = read_jsonl(path)
    return [(r["instance_id"], table_from_record(r)) for r in records]


def _load_traces(path: str | Path, config: RunConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        return [trace_from_record(r, config.fact_range) for r in read_jsonl(path)]


def _instances_with_labels(tables_path: str, labels_path: str, config: RunConfig):
    labels = corpus_mod.read_labels(labels_path)
    instances = []
    for instance_id, table in _load_tables(tables_path):
        if instance_id not in labels:
            raise ConfigError(f"no gold label for instance {instance_id!r} in {labels_path}")
        instances.append((instance_id, table, labels[instance_id]))
    return instances


# --- stage handlers ----------------------------------------------------------

def _cmd_split(args, config: RunConfig) -> None:
    if config.corpus is None or config.prices is None:
        raise ConfigError("split requires corpus and prices paths")
    transcripts = corpus_mod.read_transcripts(config.corpus)
    for t in transcripts:
        corpus_mod.validate_transcript(t, config.sectors)
    prices = corpus_mod.read_prices(config.prices)
    labels = {}
    for t in transcripts:
        if t.ticker not in prices:
            raise corpus_mod.MissingPrice(f"no price series for {t.ticker}")
        labels[t.instance_id] = corpus_mod.derive_label(
            prices[t.ticker], t.call_date, config.horizon_days, config.thresholds
        )
    train, test = corpus_mod.split_corpus(
        transcripts, config.per_sector, config.test_after, config.seed
    )
    with StageOutputs("split", Path(args.out), config) as stage:
        write_jsonl(
            stage.path("train.jsonl"),
            [corpus_mod.transcript_to_record(t, labels[t.instance_id]) for t in train],
        )
        write_jsonl(
            stage.path("test.jsonl"),
            [corpus_mod.transcript_to_record(t, labels[t.instance_id]) for t in test],
        )
        stage.counts = {"total": len(transcripts), "train": len(train), "test": len(test)}
        stage.write_manifest(
            thresholds=list(config.thresholds),
            horizon_days=config.horizon_days,
            per_sector=config.per_sector,
            test_after=config.test_after.isoformat(),
        )


def _read_metric_histories(config: RunConfig) -> dict[str, dict[MetricKind, list[float]]]:
    if config.metrics is None:
        raise ConfigError("distill requires a metrics path with per-ticker histories")
    histories: dict[str, dict[MetricKind, list[float]]] = {}
    for record in read_jsonl(config.metrics):
        histories[record["ticker"]] = {
            kind: [float(v) for v in record[kind.value]][-config.lookback :]
            for kind in MetricKind
        }
    return histories


def _cmd_distill(args, config: RunConfig) -> None:
    transcripts = corpus_mod.read_transcripts(args.transcripts)
    histories = _read_metric_histories(config)
    backend = _make_backend(config)
    templates = load_templates(config.templates)

    tables, report_records, total_facts, violations = [], [], 0, 0
    for t in transcripts:
        if t.ticker not in histories:
            raise ConfigError(f"no metric histories for ticker {t.ticker!r}")
        metric_classes = classify_metrics(histories[t.ticker], tau=config.metric_tau)
        table, report = distill(
            t, backend, templates["fact_table"], metric_classes, config.concurrency
        )
        tables.append(table_to_record(table, t.instance_id))
        total_facts += len(table.facts)
        violations += len(report.budget_violations)
        report_records.append(
            {
                "instance_id": t.instance_id,
                "speeches": [
                    {
                        "speech_id": s.speech_id,
                        "origin": s.origin.value,
                        "budget": list(s.budget),
                        "fact_count": s.fact_count,
                        "within_budget": s.within_budget,
                    }
                    for s in report.speeches
                ],
            }
        )

    with StageOutputs("distill", Path(args.out), config) as stage:
        write_jsonl(stage.path("tables.jsonl"), tables)
        write_jsonl(stage.path("distill_report.jsonl"), report_records)
        stage.counts = {
            "instances": len(tables),
            "facts": total_facts,
            "budget_violations": violations,
        }
        stage.write_manifest(lookback=config.lookback, metric_tau=config.metric_tau)
    _write_audit(backend, args.audit)


def _cmd_decide(args, config: RunConfig) -> None:
    backend = _make_backend(config)
    templates = load_templates(config.templates)
    records = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        for instance_id, table in _load_tables(args.tables):
            explanation = decide_once(table, backend, config.fact_range, templates)
            records.append(
                {
                    "instance_id": instance_id,
                    "decision": explanation.decision.value,
                    "explanation": render_explanation(explanation),
                }
            )
    with StageOutputs("decide", Path(args.out), config) as stage:
        write_jsonl(stage.path("decisions.jsonl"), records)
        stage.counts = {"instances": len(records)}
        stage.write_manifest(fact_range=list(config.fact_range))
    _write_audit(backend, args.audit)


def _cmd_reflect(args, config: RunConfig) -> None:
    backend = _make_backend(config)
    templates = load_templates(config.templates)
    instances = _instances_with_labels(args.tables, args.labels, config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        traces = run_traces(
            instances,
            backend,
            concurrency=config.concurrency,
            max_reflections=config.max_reflections,
            fact_range=config.fact_range,
            templates=templates,
            retry_limit=config.retry_limit,
            history_char_budget=config.history_char_budget,
        )
    with StageOutputs("reflect", Path(args.out), config) as stage:
        write_jsonl(stage.path("traces.jsonl"), [trace_to_record(t) for t in traces])
        stage.counts = {
            "instances": len(traces),
            "solved": sum(1 for t in traces if t.solved),
            "exhausted": sum(1 for t in traces if not t.solved),
        }
        stage.write_manifest(
            max_reflections=config.max_reflections, fact_range=list(config.fact_range)
        )
    _write_audit(backend, args.audit)


def _cmd_build_datasets(args, config: RunConfig) -> None:
    traces = _load_traces(args.traces, config)
    demos, pairs = build_datasets(traces, all_pairs=config.comparison_pairs == "all")
    with StageOutputs("build-datasets", Path(args.out), config) as stage:
        write_jsonl(stage.path("demonstrations.jsonl"), [demonstration_to_record(d) for d in demos])
        write_jsonl(stage.path("comparisons.jsonl"), [comparison_to_record(p) for p in pairs])
        stage.counts = {
            "traces": len(traces),
            "demonstrations": len(demos),
            "comparisons": len(pairs),
        }
        stage.write_manifest(comparison_pairs=config.comparison_pairs)


def _load_comparisons(path: str | Path, config: RunConfig) -> list[ComparisonPair]:
    pairs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        for record in read_jsonl(path):
            table = parse_fact_table(record["input"])
            pairs.append(
                ComparisonPair(
                    instance_id=record["instance_id"],
                    input=table,
                    preferred=parse_explanation(record["preferred"], table, config.fact_range),
                    rejected=parse_explanation(record["rejected"], table, config.fact_range),
                )
            )
    return pairs


def _load_demonstrations(path: str | Path, config: RunConfig) -> list[Demonstration]:
    demos = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        for record in read_jsonl(path):
            table = parse_fact_table(record["input"])
            demos.append(
                Demonstration(
                    instance_id=record["instance_id"],
                    input=table,
                    output=parse_explanation(record["output"], table, config.fact_range),
                )
            )
    return demos


def _train_meta(config: RunConfig, **extra) -> dict:
    meta = {
        "seed": config.seed,
        "warmup_ratio": config.warmup_ratio,
        "adam_betas": f"({config.adam_beta1}, {config.adam_beta2})",
        "adam_epsilon": config.adam_epsilon,
    }
    meta.update(extra)
    return meta


def _cmd_train_rm(args, config: RunConfig) -> None:
    pairs = _load_comparisons(args.comparisons, config)
    result = fit_reward(
        pairs,
        epochs=config.rm_epochs,
        lr=config.rm_lr,
        seed=config.seed,
        warmup_ratio=config.warmup_ratio,
    )
    with StageOutputs("train-rm", Path(args.out), config) as stage:
        save_reward_model(
            stage.path("reward_model.txt"),
            result.model,
            _train_meta(config, epochs=config.rm_epochs, lr=config.rm_lr),
        )
        _write_loss_report(stage.path("rm_training_report.txt"), "loss", result.loss_history)
        stage.counts = {"pairs": len(pairs)}
        stage.write_manifest(epochs=config.rm_epochs, lr=config.rm_lr)


def _cmd_train_policy(args, config: RunConfig) -> None:
    demos = _load_demonstrations(args.demos, config)
    reward_model = load_reward_model(args.rm)
    sft = fit_sft(
        demos,
        epochs=config.sft_epochs,
        lr=config.sft_lr,
        seed=config.seed,
        warmup_ratio=config.warmup_ratio,
    )
    rl = optimize_policy(
        sft.policy,
        reward_model,
        demos,
        beta=config.beta,
        epochs=config.rl_epochs,
        lr=config.rl_lr,
        seed=config.seed,
        warmup_ratio=config.warmup_ratio,
        penalty=config.penalty,
    )
    with StageOutputs("train-policy", Path(args.out), config) as stage:
        save_policy(
            stage.path("sft_policy.txt"),
            sft.policy,
            _train_meta(config, epochs=config.sft_epochs, lr=config.sft_lr),
        )
        save_policy(
            stage.path("rl_policy.txt"),
            rl.policy,
            _train_meta(
                config,
                epochs=config.rl_epochs,
                lr=config.rl_lr,
                beta=config.beta,
                penalty=config.penalty,
            ),
        )
        report = stage.path("policy_training_report.txt")
        with open(report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("phase epoch value\n")
            for i, v in enumerate(sft.nll_history):
                fh.write(f"sft_nll {i} {v!r}\n")
            for i, v in enumerate(rl.objective_history):
                fh.write(f"rl_objective {i} {v!r}\n")
        stage.counts = {"demonstrations": len(demos)}
        stage.write_manifest(
            sft_epochs=config.sft_epochs,
            sft_lr=config.sft_lr,
            rl_epochs=config.rl_epochs,
            rl_lr=config.rl_lr,
            beta=config.beta,
            penalty=config.penalty,
        )


def _write_loss_report(path: Path, name: str, history: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"epoch {name}\n")
        for i, value in enumerate(history):
            fh.write(f"{i} {value!r}\n")


def _cmd_evaluate(args, config: RunConfig) -> None:
    traces = _load_traces(args.traces, config)
    gold = [t.gold for t in traces]
    final = [t.attempts[-1].explanation.decision for t in traces]
    metrics = macro_metrics(gold, final)
    with StageOutputs("evaluate", Path(args.out), config) as stage:
        rows = [
            ("accuracy", metrics.accuracy),
            ("macro_precision", metrics.precision),
            ("macro_recall", metrics.recall),
            ("macro_f1", metrics.f1),
        ]
        lines = [f"{name.ljust(16)} {value:.4f}" for name, value in rows]
        lines.append("")
        lines.append("class  precision  recall  f1")
        for label, (p, r, f1) in metrics.per_class.items():
            lines.append(f"{label.value.ljust(5)}  {p:9.4f}  {r:6.4f}  {f1:.4f}")
        stage.path("metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_jsonl(
            stage.path("metrics.jsonl"),
            [{"metric": name, "value": value} for name, value in rows],
        )
        for round_index in range(config.max_reflections + 1):
            matrix = confusion_by_round(traces, round_index)
            matrix.write_csv(stage.path(f"confusion_round_{round_index}.csv"))
        stage.counts = {"instances": len(traces)}
        stage.write_manifest(rounds=config.max_reflections + 1)


def _cmd_paths(args, config: RunConfig) -> None:
    traces = _load_traces(args.traces, config)
    report = mine_paths(traces, args.top_k)
    with StageOutputs("paths", Path(args.out), config) as stage:
        stage.path("paths.txt").write_text(report.render() + "\n", encoding="utf-8")
        records = [
            {"outcome": path.outcome.value, "path": path.text, "percent": pct}
            for partition in (report.correct, report.incorrect)
            for path, pct in partition
        ]
        write_jsonl(stage.path("paths.jsonl"), records)
        stage.counts = {"traces": report.total_traces}
        stage.write_manifest(top_k=args.top_k)


def _cmd_stats(args, config: RunConfig) -> None:
    traces = _load_traces(args.traces, config)
    solved = [t for t in traces if t.solved]
    if not solved:
        raise ConfigError("no solved traces to summarize")
    explanations = [t.attempts[-1].explanation for t in solved]
    tables = [t.table for t in solved]
    report = fact_statistics(explanations, tables)
    with StageOutputs("stats", Path(args.out), config) as stage:
        stage.path("fact_stats.txt").write_text(report.render() + "\n", encoding="utf-8")
        write_jsonl(
            stage.path("fact_stats.jsonl"),
            [
                {
                    "instances": report.instances,
                    "mean_table_facts": report.mean_table_facts,
                    "mean_selected": report.mean_selected,
                    "mean_favorable": report.mean_favorable,
                    "mean_adverse": report.mean_adverse,
                    "favorable_by_magnitude": list(report.favorable_by_magnitude),
                    "adverse_by_magnitude": list(report.adverse_by_magnitude),
                }
            ],
        )
        stage.counts = {"instances": report.instances}
        stage.write_manifest()


def _parse_ranges(text: str) -> tuple[tuple[int, int], ...]:
    ranges = []
    for part in text.split(","):
        lo, hi = part.strip().split("-")
        ranges.append((int(lo), int(hi)))
    return tuple(ranges)


def _cmd_sweep(args, config: RunConfig) -> None:
    backend = _make_backend(config)
    templates = load_templates(config.templates)
    instances = _instances_with_labels(args.tables, args.labels, config)
    ranges = _parse_ranges(args.ranges) if args.ranges else DEFAULT_SWEEP_RANGES
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        result = sweep_fact_ranges(
            instances,
            backend,
            ranges=ranges,
            max_reflections=config.max_reflections,
            templates=templates,
            retry_limit=config.retry_limit,
            history_char_budget=config.history_char_budget,
        )
    with StageOutputs("sweep", Path(args.out), config) as stage:
        stage.path("sweep.txt").write_text(result.render() + "\n", encoding="utf-8")
        write_jsonl(
            stage.path("sweep.jsonl"),
            [
                {"range": f"{lo}-{hi}", "solve_rates": list(result.solve_rates[(lo, hi)])}
                for lo, hi in result.ranges
            ],
        )
        stage.counts = {"instances": len(instances), "ranges": len(result.ranges)}
        stage.write_manifest(ranges=[f"{lo}-{hi}" for lo, hi in result.ranges])
    _write_audit(backend, args.audit)


# --- parser -------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factdesk",
        description="Earnings-call decision pipeline: distill, reflect, learn, evaluate.",
    )
    sub = parser.add_subparsers(dest="command")

    def stage(name: str, handler, help_text: str, audit: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key-value config file")
        p.add_argument("--seed", help="override the config seed")
        p.add_argument(
            "--backend",
            help="'remote' or 'scripted:<script path>' (overrides the config)",
        )
        p.add_argument("--out", required=True, help="output directory for this stage")
        if audit:
            p.add_argument("--audit", default=None, help="write a call audit log to this path")
        else:
            p.set_defaults(audit=None)
        p.set_defaults(handler=handler)
        return p

    stage("split", _cmd_split, "label transcripts and write train/test splits")

    p = stage("distill", _cmd_distill, "turn transcripts into fact tables", audit=True)
    p.add_argument("--transcripts", required=True, help="transcript/split JSONL file")

    p = stage("decide", _cmd_decide, "one decision per fact table", audit=True)
    p.add_argument("--tables", required=True, help="fact tables JSONL file")

    p = stage("reflect", _cmd_reflect, "run reflection traces", audit=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--labels", required=True, help="split file carrying gold labels")

    p = stage("build-datasets", _cmd_build_datasets, "demonstrations and comparisons from traces")
    p.add_argument("--traces", required=True)

    p = stage("train-rm", _cmd_train_rm, "fit the pairwise reward model")
    p.add_argument("--comparisons", required=True)

    p = stage("train-policy", _cmd_train_policy, "fit the decision policy (supervised, then reward-guided)")
    p.add_argument("--demos", required=True)
    p.add_argument("--rm", required=True, help="reward model file")

    p = stage("evaluate", _cmd_evaluate, "macro metrics and per-round confusion matrices")
    p.add_argument("--traces", required=True)

    p = stage("paths", _cmd_paths, "most common decision paths")
    p.add_argument("--traces", required=True)
    p.add_argument("--top-k", type=int, default=10, dest="top_k")

    p = stage("stats", _cmd_stats, "supporting-fact statistics over solved traces")
    p.add_argument("--traces", required=True)

    p = stage("sweep", _cmd_sweep, "reflection sweep across selection ranges", audit=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ranges", default=None, help="comma-separated lo-hi list, e.g. 3-6,6-10,10-15")

    return parser


def _overrides_from_args(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend is not None:
        if args.backend.startswith("scripted:"):
            overrides["backend"] = "scripted"
            # Flag paths are cwd-relative, unlike config-file paths.
            overrides["script"] = str(Path(args.backend.split(":", 1)[1]).absolute())
        else:
            overrides["backend"] = args.backend
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        config = load_run_config(args.config, _overrides_from_args(args))
        args.handler(args, config)
        return 0
    except Exception as exc:  # diagnostics on stderr, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
