"""Self-reflection loop and dataset manufacture.

A trace starts with one decision attempt and keeps reflecting on its own
incorrect outputs (without being told the answer) until the decision matches
gold or the reflection budget runs out. Solved traces become demonstrations
and (preferred, rejected) comparison pairs; exhausted traces are dropped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .backend import LlmBackend, PromptTemplate
from .corpus import DecisionLabel
from .explanation import (
    DEFAULT_FACT_RANGE,
    StructuredExplanation,
    parse_explanation,
    render_explanation,
)
from .facttable import FactTable, render_fact_table, table_from_record, table_to_record

DEFAULT_MAX_REFLECTIONS = 4
DEFAULT_RETRY_LIMIT = 2
DEFAULT_HISTORY_CHAR_BUDGET = 20_000

PATH_ARROW = "→"


class Termination(Enum):
    SOLVED = "Solved"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class Attempt:
    """One decision attempt with its raw backend response.

    ``repeated_decision`` marks attempts whose decision duplicated an earlier
    one despite the distinct-decision instruction (accepted after retries ran
    out, kept for analysis rather than masked).
    """

    explanation: StructuredExplanation
    correct: bool
    raw_response: str
    repeated_decision: bool = False


@dataclass(frozen=True)
class ReflectionTrace:
    instance_id: str
    table: FactTable
    gold: DecisionLabel
    attempts: tuple[Attempt, ...]
    terminated: Termination

    @property
    def solved(self) -> bool:
        return self.terminated is Termination.SOLVED

    @property
    def decisions(self) -> tuple[DecisionLabel, ...]:
        return tuple(a.explanation.decision for a in self.attempts)

    @property
    def path_text(self) -> str:
        return PATH_ARROW.join(d.value for d in self.decisions)


@dataclass(frozen=True)
class Demonstration:
    """Training record: a fact table paired with a gold-decision explanation."""

    instance_id: str
    input: FactTable
    output: StructuredExplanation


@dataclass(frozen=True)
class ComparisonPair:
    """Preference record: correct output preferred over an incorrect one
    from the same instance."""

    instance_id: str
    input: FactTable
    preferred: StructuredExplanation
    rejected: StructuredExplanation


@dataclass(frozen=True)
class ReflectionStep:
    """Outcome of one reflection call, including retry bookkeeping."""

    explanation: StructuredExplanation
    raw_response: str
    repeated_decision: bool


def _decision_slots(
    table: FactTable, fact_range: tuple[int, int]
) -> dict[str, str]:
    lo, hi = fact_range
    return {
        "company-ticker": table.ticker,
        "min-facts": str(lo),
        "max-facts": str(hi),
        "fact-table": render_fact_table(table),
    }


def render_history(
    history: Sequence[StructuredExplanation],
    char_budget: int = DEFAULT_HISTORY_CHAR_BUDGET,
) -> str:
    """Prior incorrect outputs rendered for the reflection prompt.

    Full outputs (facts, strengths, decision, justification) are included.
    When the rendering exceeds ``char_budget``, whole attempts are dropped
    oldest-first; the most recent attempt is always kept.
    """
    blocks = [
        f"Attempt {i}:\n{render_explanation(e)}"
        for i, e in enumerate(history, start=1)
    ]
    kept = list(blocks)
    dropped = 0
    while len(kept) > 1 and sum(len(b) + 2 for b in kept) > char_budget:
        kept.pop(0)
        dropped += 1
    if dropped:
        kept.insert(0, f"[{dropped} earlier attempt(s) omitted]")
    return "\n\n".join(kept)


def decide_once(
    table: FactTable,
    backend: LlmBackend,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> StructuredExplanation:
    """Initial decision: fill the decision prompt, parse the response.

    ``ParseError`` carries the raw backend response for post-mortems.
    """
    template = _require(templates, "decision")
    raw = backend.complete(template, _decision_slots(table, fact_range))
    return parse_explanation(raw, table, fact_range)


def reflect_once(
    table: FactTable,
    history: Sequence[StructuredExplanation],
    backend: LlmBackend,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    templates: Mapping[str, PromptTemplate] | None = None,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
    history_char_budget: int = DEFAULT_HISTORY_CHAR_BUDGET,
) -> ReflectionStep:
    """One reflection turn over the incorrect attempts so far.

    If the response repeats a decision already in ``history``, the call is
    retried up to ``retry_limit`` times (each retry carries a distinct
    ``attempt`` slot, so scripted backends can vary their answers); after
    that the repeat is accepted and flagged, never fabricated away.
    """
    if not history:
        raise ValueError("reflection requires at least one prior incorrect attempt")
    template = _require(templates, "reflection")
    lo, hi = fact_range
    base_slots = {
        "min-facts": str(lo),
        "max-facts": str(hi),
        "fact-table": render_fact_table(table),
        "previous-incorrect-outputs": render_history(history, history_char_budget),
    }
    previous = {e.decision for e in history}

    raw = ""
    explanation: StructuredExplanation | None = None
    for attempt_index in range(retry_limit + 1):
        slots = dict(base_slots, attempt=str(attempt_index))
        raw = backend.complete(template, slots)
        explanation = parse_explanation(raw, table, fact_range)
        if explanation.decision not in previous:
            return ReflectionStep(explanation, raw, repeated_decision=False)
    assert explanation is not None
    return ReflectionStep(explanation, raw, repeated_decision=True)


def run_trace(
    table: FactTable,
    gold: DecisionLabel,
    backend: LlmBackend,
    max_reflections: int = DEFAULT_MAX_REFLECTIONS,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    templates: Mapping[str, PromptTemplate] | None = None,
    instance_id: str | None = None,
    enforce_distinct: bool = True,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
    history_char_budget: int = DEFAULT_HISTORY_CHAR_BUDGET,
) -> ReflectionTrace:
    """Full loop: initial decision, then reflections until correct or exhausted.

    Correctness means the attempt's decision equals ``gold``. Every attempt is
    recorded verbatim. With ``enforce_distinct`` off, reflections accept any
    decision without retries or flags.
    """
    if max_reflections < 0:
        raise ValueError("max_reflections must be >= 0")
    if instance_id is None:
        instance_id = table.ticker

    attempts: list[Attempt] = []
    try:
        decision_template = _require(templates, "decision")
        raw = backend.complete(decision_template, _decision_slots(table, fact_range))
        first = parse_explanation(raw, table, fact_range)
        attempts.append(Attempt(first, first.decision == gold, raw))

        while not attempts[-1].correct and len(attempts) <= max_reflections:
            history = [a.explanation for a in attempts]
            step = reflect_once(
                table,
                history,
                backend,
                fact_range,
                templates,
                retry_limit=retry_limit if enforce_distinct else 0,
                history_char_budget=history_char_budget,
            )
            repeated = step.repeated_decision if enforce_distinct else False
            attempts.append(
                Attempt(step.explanation, step.explanation.decision == gold, step.raw_response, repeated)
            )
    except Exception as exc:
        exc.instance_id = instance_id
        exc.partial_attempts = tuple(attempts)
        raise

    terminated = Termination.SOLVED if attempts[-1].correct else Termination.EXHAUSTED
    return ReflectionTrace(
        instance_id=instance_id,
        table=table,
        gold=gold,
        attempts=tuple(attempts),
        terminated=terminated,
    )


def run_traces(
    instances: Sequence[tuple[str, FactTable, DecisionLabel]],
    backend: LlmBackend,
    concurrency: int = 1,
    **kwargs,
) -> list[ReflectionTrace]:
    """Run one trace per (instance_id, table, gold); order-preserving."""

    def one(item: tuple[str, FactTable, DecisionLabel]) -> ReflectionTrace:
        instance_id, table, gold = item
        return run_trace(table, gold, backend, instance_id=instance_id, **kwargs)

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(one, instances))
    return [one(item) for item in instances]


def build_datasets(
    traces: Sequence[ReflectionTrace],
    all_pairs: bool = False,
) -> tuple[list[Demonstration], list[ComparisonPair]]:
    """Demonstrations and comparisons from completed traces.

    Each solved trace contributes its final (correct) attempt as a
    demonstration. Traces solved after at least one reflection also contribute
    comparison pairs: the final attempt preferred over the immediately
    preceding incorrect one, or over every earlier incorrect attempt with
    ``all_pairs``. Exhausted traces contribute nothing.
    """
    demonstrations: list[Demonstration] = []
    comparisons: list[ComparisonPair] = []
    for trace in traces:
        if not trace.solved:
            continue
        final = trace.attempts[-1].explanation
        demonstrations.append(
            Demonstration(instance_id=trace.instance_id, input=trace.table, output=final)
        )
        if len(trace.attempts) < 2:
            continue
        rejected_pool = trace.attempts[:-1] if all_pairs else trace.attempts[-2:-1]
        for attempt in rejected_pool:
            comparisons.append(
                ComparisonPair(
                    instance_id=trace.instance_id,
                    input=trace.table,
                    preferred=final,
                    rejected=attempt.explanation,
                )
            )
    return demonstrations, comparisons


def _require(
    templates: Mapping[str, PromptTemplate] | None, name: str
) -> PromptTemplate:
    if templates is None:
        from .backend import default_template_dir, load_templates

        templates = load_templates(default_template_dir())
    return templates[name]


# --- serialization -----------------------------------------------------------

def trace_to_record(trace: ReflectionTrace) -> dict:
    return {
        "instance_id": trace.instance_id,
        "gold": trace.gold.value,
        "terminated": trace.terminated.value,
        "table": table_to_record(trace.table),
        "attempts": [
            {
                "explanation": render_explanation(a.explanation),
                "correct": a.correct,
                "raw_response": a.raw_response,
                "repeated_decision": a.repeated_decision,
            }
            for a in trace.attempts
        ],
    }


def trace_from_record(record: Mapping, fact_range: tuple[int, int] = DEFAULT_FACT_RANGE) -> ReflectionTrace:
    table = table_from_record(record["table"])
    attempts = tuple(
        Attempt(
            explanation=parse_explanation(a["explanation"], table, fact_range),
            correct=a["correct"],
            raw_response=a["raw_response"],
            repeated_decision=a.get("repeated_decision", False),
        )
        for a in record["attempts"]
    )
    return ReflectionTrace(
        instance_id=record["instance_id"],
        table=table,
        gold=DecisionLabel(record["gold"]),
        attempts=attempts,
        terminated=Termination(record["terminated"]),
    )


def demonstration_to_record(demo: Demonstration) -> dict:
    return {
        "instance_id": demo.instance_id,
        "input": render_fact_table(demo.input),
        "output": render_explanation(demo.output),
    }


def comparison_to_record(pair: ComparisonPair) -> dict:
    return {
        "instance_id": pair.instance_id,
        "input": render_fact_table(pair.input),
        "preferred": render_explanation(pair.preferred),
        "rejected": render_explanation(pair.rejected),
    }
