"""The structured-explanation format: parse, validate, render, summarize.

An explanation is {selected facts with signed strengths, a decision, a brief
justification}. The text surface is the response format the decision prompt
demands; ``parse_explanation`` and ``render_explanation`` are exact inverses
on valid explanations, which is what makes traces and datasets replayable.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .corpus import DecisionLabel
from .facttable import FactTable

DEFAULT_FACT_RANGE: tuple[int, int] = (6, 10)

# Above this share of one sign among the selections, a skew warning is emitted.
SKEW_WARNING_SHARE = 0.90


class Sign(Enum):
    POSITIVE = "+"
    NEGATIVE = "-"


@dataclass(frozen=True)
class Strength:
    """Signed impact strength; rendered as the sign symbol repeated 1-3 times."""

    sign: Sign
    magnitude: int

    def __post_init__(self) -> None:
        if self.magnitude not in (1, 2, 3):
            raise ValueError(f"strength magnitude must be 1..3, got {self.magnitude}")

    def render(self) -> str:
        return self.sign.value * self.magnitude

    @property
    def signed_value(self) -> int:
        return self.magnitude if self.sign is Sign.POSITIVE else -self.magnitude


@dataclass(frozen=True)
class SelectedFact:
    fact_index: int
    content: str
    strength: Strength


@dataclass(frozen=True)
class StructuredExplanation:
    selected: tuple[SelectedFact, ...]
    decision: DecisionLabel
    justification: str

    @property
    def favorable(self) -> tuple[SelectedFact, ...]:
        return tuple(f for f in self.selected if f.strength.sign is Sign.POSITIVE)

    @property
    def adverse(self) -> tuple[SelectedFact, ...]:
        return tuple(f for f in self.selected if f.strength.sign is Sign.NEGATIVE)


class ParseError(Exception):
    """Explanation text failed validation; carries per-line diagnostics."""

    def __init__(self, diagnostics: Sequence[str], raw_response: str | None = None):
        self.diagnostics = list(diagnostics)
        self.raw_response = raw_response
        super().__init__("; ".join(self.diagnostics))


class ExplanationWarning(UserWarning):
    """Non-fatal oddity in an otherwise valid explanation."""


class LengthMismatch(Exception):
    """Aligned lists have different lengths."""


_DECISIONS = {
    "strongly buy": DecisionLabel.STRONGLY_BUY,
    "strong buy": DecisionLabel.STRONGLY_BUY,
    "buy": DecisionLabel.BUY,
    "hold": DecisionLabel.HOLD,
    "sell": DecisionLabel.SELL,
    "strongly sell": DecisionLabel.STRONGLY_SELL,
    "strong sell": DecisionLabel.STRONGLY_SELL,
}

_FACT_LINE = re.compile(
    r"^\[?\s*Fact\s+\[?(\d+)\]?\s*\]?\s*\|\s*(.*?)\s*[:]\s*([+\-]+)\s*$",
    re.IGNORECASE,
)
_SECTION_FACTS = re.compile(r"^selected facts\b.*:$", re.IGNORECASE)
_SECTION_DECISION = re.compile(r"^decision\s*:\s*(.*)$", re.IGNORECASE)
_SECTION_JUSTIFICATION = re.compile(r"^justification\s*:\s*(.*)$", re.IGNORECASE)


def _strip_markup(line: str) -> str:
    """Drop leading bullets and bold markers so drifting LLM output still parses."""
    line = line.strip()
    line = re.sub(r"^[-*•]+\s*", "", line)
    return line.replace("**", "").strip()


def parse_decision_text(text: str) -> DecisionLabel | None:
    """Match one of the five labels (long-form synonyms accepted), or None."""
    return _DECISIONS.get(text.strip().rstrip(".").lower())


def parse_explanation(
    text: str,
    table: FactTable,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
) -> StructuredExplanation:
    """Parse response text into a validated explanation.

    Extracts the fact list, decision, and justification sections; strengths
    come from the trailing run of ``+`` or ``-`` on each fact line. All
    validation failures are collected into one ``ParseError`` rather than
    stopping at the first.
    """
    lo, hi = fact_range
    if lo > hi:
        raise ValueError(f"fact range lower bound exceeds upper: {fact_range}")

    diagnostics: list[str] = []
    soft_warnings: list[str] = []
    selected: list[SelectedFact] = []
    decision: DecisionLabel | None = None
    decision_seen = False
    justification_lines: list[str] | None = None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_markup(raw_line)
        if not line:
            continue

        if justification_lines is not None:
            justification_lines.append(line)
            continue

        m = _SECTION_JUSTIFICATION.match(line)
        if m:
            justification_lines = [m.group(1).strip()] if m.group(1).strip() else []
            continue
        m = _SECTION_DECISION.match(line)
        if m:
            decision_seen = True
            decision_text = m.group(1).strip()
            if not decision_text:
                continue  # label on the following line (reflection format)
            decision = parse_decision_text(decision_text)
            if decision is None:
                diagnostics.append(f"line {lineno}: unknown decision label {decision_text!r}")
            continue
        if decision_seen and decision is None:
            # Reflection-style responses put the label on the line after "Decision:".
            parsed = parse_decision_text(line)
            if parsed is None:
                diagnostics.append(f"line {lineno}: unknown decision label {line!r}")
            else:
                decision = parsed
            continue
        if _SECTION_FACTS.match(line):
            continue

        m = _FACT_LINE.match(line)
        if m:
            index = int(m.group(1))
            content = m.group(2).strip()
            run = m.group(3)
            if len(set(run)) > 1:
                diagnostics.append(f"line {lineno}: mixed-sign strength run {run!r}")
                continue
            if not 1 <= len(run) <= 3:
                diagnostics.append(
                    f"line {lineno}: strength run length {len(run)} outside [1, 3]"
                )
                continue
            if not content:
                diagnostics.append(f"line {lineno}: empty fact content")
                continue
            if not 1 <= index <= len(table.facts):
                diagnostics.append(
                    f"line {lineno}: fact index {index} outside table bounds 1..{len(table.facts)}"
                )
                continue
            strength = Strength(
                sign=Sign.POSITIVE if run[0] == "+" else Sign.NEGATIVE,
                magnitude=len(run),
            )
            selected.append(SelectedFact(fact_index=index, content=content, strength=strength))
            continue

        if not decision_seen:
            diagnostics.append(f"line {lineno}: unparseable fact line {raw_line.strip()!r}")

    if not selected:
        diagnostics.append("missing section: no selected facts found")
    if decision is None and not any("unknown decision" in d for d in diagnostics):
        diagnostics.append("missing section: no decision found")
    justification = " ".join(justification_lines).strip() if justification_lines else ""
    if not justification:
        diagnostics.append("missing section: no justification found")

    if selected and not lo <= len(selected) <= hi:
        diagnostics.append(
            f"selected {len(selected)} facts, outside configured range {lo}-{hi}"
        )
    n_pos = sum(1 for f in selected if f.strength.sign is Sign.POSITIVE)
    n_neg = len(selected) - n_pos
    if selected and lo >= 2 and (n_pos == 0 or n_neg == 0):
        diagnostics.append(
            "balance rule: need at least one positive and one negative strength"
        )

    if diagnostics:
        raise ParseError(diagnostics, raw_response=text)

    indices = [f.fact_index for f in selected]
    duplicates = sorted({i for i in indices if indices.count(i) > 1})
    if duplicates:
        soft_warnings.append(f"fact indices selected more than once: {duplicates}")
    if len(selected) >= 2 and max(n_pos, n_neg) > SKEW_WARNING_SHARE * len(selected):
        soft_warnings.append(
            f"sign skew: {max(n_pos, n_neg)}/{len(selected)} selections share one sign"
        )
    for message in soft_warnings:
        warnings.warn(message, ExplanationWarning, stacklevel=2)

    assert decision is not None
    return StructuredExplanation(
        selected=tuple(selected), decision=decision, justification=justification
    )


def render_explanation(e: StructuredExplanation) -> str:
    """Canonical text form; ``parse_explanation`` of the result returns ``e``."""
    lines = ["Selected Facts with Assigned Strength:"]
    for f in e.selected:
        lines.append(f"- [Fact {f.fact_index}] | {f.content}: {f.strength.render()}")
    lines.append(f"Decision: {e.decision.text}")
    lines.append(f"Justification: {e.justification}")
    return "\n".join(lines)


@dataclass(frozen=True)
class StatsReport:
    """Per-instance means over an aligned explanation/table corpus."""

    instances: int
    mean_table_facts: float
    mean_selected: float
    mean_favorable: float
    mean_adverse: float
    favorable_by_magnitude: tuple[float, float, float]
    adverse_by_magnitude: tuple[float, float, float]

    def render(self) -> str:
        rows = [
            ("Instances", f"{self.instances}"),
            ("Total facts per table", f"{self.mean_table_facts:.2f}"),
            ("Supporting facts per instance", f"{self.mean_selected:.2f}"),
            ("Favorable supporting facts", f"{self.mean_favorable:.2f}"),
            (
                "Favorable facts with strengths 1 to 3",
                " / ".join(f"{v:.2f}" for v in self.favorable_by_magnitude),
            ),
            ("Adverse supporting facts", f"{self.mean_adverse:.2f}"),
            (
                "Adverse facts with strengths 1 to 3",
                " / ".join(f"{v:.2f}" for v in self.adverse_by_magnitude),
            ),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def fact_statistics(
    explanations: Sequence[StructuredExplanation],
    tables: Sequence[FactTable],
) -> StatsReport:
    """Supporting-fact statistics over aligned (explanation, table) pairs.

    Raises:
        LengthMismatch: if the two lists differ in length.
    """
    if len(explanations) != len(tables):
        raise LengthMismatch(
            f"{len(explanations)} explanations vs {len(tables)} tables"
        )
    if not explanations:
        raise ValueError("cannot summarize an empty corpus")

    n = len(explanations)
    total_table = sum(len(t.facts) for t in tables)
    total_selected = sum(len(e.selected) for e in explanations)
    fav_by_mag = [0, 0, 0]
    adv_by_mag = [0, 0, 0]
    for e in explanations:
        for f in e.selected:
            bucket = fav_by_mag if f.strength.sign is Sign.POSITIVE else adv_by_mag
            bucket[f.strength.magnitude - 1] += 1

    return StatsReport(
        instances=n,
        mean_table_facts=total_table / n,
        mean_selected=total_selected / n,
        mean_favorable=sum(fav_by_mag) / n,
        mean_adverse=sum(adv_by_mag) / n,
        favorable_by_magnitude=tuple(c / n for c in fav_by_mag),
        adverse_by_magnitude=tuple(c / n for c in adv_by_mag),
    )
