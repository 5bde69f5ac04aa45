"""Evaluation suite: macro metrics, per-round confusion, decision paths,
random baselines, and fact-range sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backend import LlmBackend, PromptTemplate
from .corpus import LABEL_ORDER, DecisionLabel
from .facttable import FactTable
from .reflect import PATH_ARROW, ReflectionTrace, run_traces

# The three selection ranges compared in the fact-range experiment.
DEFAULT_SWEEP_RANGES: tuple[tuple[int, int], ...] = ((3, 6), (6, 10), (10, 15))


class LengthMismatch(Exception):
    """Gold and prediction lists differ in length."""


class BadDistribution(Exception):
    """A probability vector is malformed."""


class Outcome(Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"


@dataclass(frozen=True)
class MacroMetrics:
    """Macro-averaged precision/recall/F1 plus exact-match accuracy.

    Macro averages run over the classes present in gold or predictions;
    classes never predicted (or never occurring) score 0 where a denominator
    vanishes, and ``zero_division_classes`` lists them.
    """

    recall: float
    precision: float
    f1: float
    accuracy: float
    per_class: Mapping[DecisionLabel, tuple[float, float, float]]
    zero_division_classes: tuple[DecisionLabel, ...]


def macro_metrics(
    gold: Sequence[DecisionLabel], pred: Sequence[DecisionLabel]
) -> MacroMetrics:
    """Per-class P/R/F1 averaged unweighted, plus accuracy.

    Per-class F1 is the harmonic mean of that class's precision and recall
    (the macro-F1 is the average of per-class F1s, not the F1 of macro
    averages). Classes absent from both gold and predictions contribute
    nothing to the average.
    """
    if len(gold) != len(pred):
        raise LengthMismatch(f"{len(gold)} gold vs {len(pred)} predictions")
    if not gold:
        raise ValueError("cannot evaluate an empty prediction list")

    present = [c for c in LABEL_ORDER if c in gold or c in pred]
    per_class: dict[DecisionLabel, tuple[float, float, float]] = {}
    flagged: list[DecisionLabel] = []
    for c in present:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        n_pred = sum(1 for p in pred if p == c)
        n_gold = sum(1 for g in gold if g == c)
        if n_pred == 0 or n_gold == 0:
            flagged.append(c)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gold if n_gold else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = (precision, recall, f1)

    accuracy = sum(1 for g, p in zip(gold, pred) if g == p) / len(gold)
    return MacroMetrics(
        recall=sum(v[1] for v in per_class.values()) / len(present),
        precision=sum(v[0] for v in per_class.values()) / len(present),
        f1=sum(v[2] for v in per_class.values()) / len(present),
        accuracy=accuracy,
        per_class=per_class,
        zero_division_classes=tuple(flagged),
    )


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """5x5 counts, rows = gold, columns = predicted, both in SB,B,H,S,SS order."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def render(self) -> str:
        header = ["gold\\pred"] + [label.value for label in LABEL_ORDER]
        rows = [header] + [
            [LABEL_ORDER[i].value] + [str(int(v)) for v in self.counts[i]]
            for i in range(len(LABEL_ORDER))
        ]
        widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
        return "\n".join(
            "  ".join(cell.rjust(widths[j]) for j, cell in enumerate(row)) for row in rows
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gold\\pred"] + [label.value for label in LABEL_ORDER])
            for i, label in enumerate(LABEL_ORDER):
                writer.writerow([label.value] + [int(v) for v in self.counts[i]])


def decision_at_round(trace: ReflectionTrace, round_index: int) -> DecisionLabel:
    """The trace's decision as of a reflection round; traces that stopped
    earlier carry their final decision forward."""
    attempts = trace.attempts
    return attempts[min(round_index, len(attempts) - 1)].explanation.decision


def confusion_by_round(
    traces: Sequence[ReflectionTrace], round_index: int
) -> ConfusionMatrix:
    """Gold-vs-decision confusion matrix after ``round_index`` reflections."""
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    counts = np.zeros((len(LABEL_ORDER), len(LABEL_ORDER)), dtype=int)
    index = {label: i for i, label in enumerate(LABEL_ORDER)}
    for trace in traces:
        counts[index[trace.gold], index[decision_at_round(trace, round_index)]] += 1
    return ConfusionMatrix(counts=counts)


@dataclass(frozen=True)
class DecisionPath:
    sequence: tuple[DecisionLabel, ...]
    outcome: Outcome

    @property
    def text(self) -> str:
        return PATH_ARROW.join(d.value for d in self.sequence)


@dataclass(frozen=True)
class PathReport:
    """Most common decision paths, partitioned by outcome.

    Percentages are relative to all traces (count * 100 / total), sorted
    descending with lexicographic tie-breaks on the path.
    """

    total_traces: int
    correct: tuple[tuple[DecisionPath, float], ...]
    incorrect: tuple[tuple[DecisionPath, float], ...]

    def render(self) -> str:
        def block(title: str, items) -> list[str]:
            lines = [title]
            lines.extend(f"  {path.text} ({pct:.1f}%)" for path, pct in items)
            return lines

        return "\n".join(
            block("Frequent paths leading to correct decisions:", self.correct)
            + block("Frequent paths leading to incorrect decisions:", self.incorrect)
        )


def mine_paths(traces: Sequence[ReflectionTrace], top_k: int) -> PathReport:
    """Top-k decision paths per outcome with their corpus-wide percentages."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    total = len(traces)
    counts: dict[tuple[Outcome, tuple[DecisionLabel, ...]], int] = {}
    for trace in traces:
        outcome = Outcome.CORRECT if trace.solved else Outcome.INCORRECT
        key = (outcome, trace.decisions)
        counts[key] = counts.get(key, 0) + 1

    def top(outcome: Outcome) -> tuple[tuple[DecisionPath, float], ...]:
        items = [
            (DecisionPath(sequence=seq, outcome=outcome), count)
            for (out, seq), count in counts.items()
            if out is outcome
        ]
        items.sort(key=lambda item: (-item[1], tuple(d.value for d in item[0].sequence)))
        return tuple(
            (path, count * 100.0 / total) for path, count in items[:top_k]
        )

    return PathReport(
        total_traces=total,
        correct=top(Outcome.CORRECT),
        incorrect=top(Outcome.INCORRECT),
    )


class BaselineScheme(Enum):
    UNIFORM = "Uniform"
    MATCHED = "Matched"


def random_baseline(
    gold_distribution: Sequence[float],
    scheme: BaselineScheme = BaselineScheme.UNIFORM,
) -> float:
    """Expected accuracy of random guessing over the five classes.

    Uniform guessing scores exactly 1/5 regardless of the gold distribution;
    guessing from the gold distribution itself scores sum(p_i^2). Both are
    analytic expectations, and both are at least 0.20, so a sub-20% figure
    cannot come from either scheme.
    """
    p = np.asarray(gold_distribution, dtype=float)
    if p.size != len(LABEL_ORDER):
        raise BadDistribution(f"expected {len(LABEL_ORDER)} probabilities, got {p.size}")
    if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise BadDistribution(f"probabilities must be nonnegative and sum to 1, got {p.tolist()}")
    if scheme is BaselineScheme.UNIFORM:
        return 1.0 / len(LABEL_ORDER)
    return float(np.sum(p * p))


@dataclass(frozen=True)
class SweepResult:
    """Cumulative solve rate after each round, per selection range."""

    ranges: tuple[tuple[int, int], ...]
    solve_rates: Mapping[tuple[int, int], tuple[float, ...]]

    def render(self) -> str:
        n_rounds = len(next(iter(self.solve_rates.values())))
        header = ["range"] + [f"round{r}" for r in range(n_rounds)]
        rows = [header]
        for lo, hi in self.ranges:
            rates = self.solve_rates[(lo, hi)]
            rows.append([f"{lo}-{hi}"] + [f"{rate:.4f}" for rate in rates])
        widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
        return "\n".join(
            "  ".join(cell.rjust(widths[j]) for j, cell in enumerate(row)) for row in rows
        )


def cumulative_solve_rates(
    traces: Sequence[ReflectionTrace], max_reflections: int
) -> tuple[float, ...]:
    """Fraction of traces solved within k+1 attempts, for k = 0..max_reflections."""
    rates = []
    for k in range(max_reflections + 1):
        solved = sum(
            1 for t in traces if t.solved and len(t.attempts) <= k + 1
        )
        rates.append(solved / len(traces) if traces else 0.0)
    return tuple(rates)


def sweep_fact_ranges(
    instances: Sequence[tuple[str, FactTable, DecisionLabel]],
    backend: LlmBackend,
    ranges: Sequence[tuple[int, int]] = DEFAULT_SWEEP_RANGES,
    max_reflections: int = 4,
    templates: Mapping[str, PromptTemplate] | None = None,
    **trace_kwargs,
) -> SweepResult:
    """Re-run the reflection loop once per selection range and report the
    cumulative solve rate after each round."""
    if not ranges:
        raise ValueError("ranges must be nonempty")
    solve_rates: dict[tuple[int, int], tuple[float, ...]] = {}
    for fact_range in ranges:
        traces = run_traces(
            instances,
            backend,
            fact_range=tuple(fact_range),
            max_reflections=max_reflections,
            templates=templates,
            **trace_kwargs,
        )
        solve_rates[tuple(fact_range)] = cumulative_solve_rates(traces, max_reflections)
    return SweepResult(ranges=tuple(tuple(r) for r in ranges), solve_rates=solve_rates)
