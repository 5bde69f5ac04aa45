"""Fact-table distillation: transcripts in, tables of key facts out.

Each executive speech is summarized by the LLM backend under a per-segment
fact budget; the returned lines become indexed facts. Tables also carry three
historical-metric classifications (EPS, revenue trend, historical price), each
Bullish/Stable/Bearish from a normalized linear-fit slope.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .backend import BackendError, LlmBackend, PromptTemplate
from .corpus import Speech, Transcript, executive_speeches


class Origin(str, Enum):
    PREPARED_REMARKS = "PreparedRemarks"
    QA = "QA"


class MetricKind(str, Enum):
    EPS = "EPS"
    REVENUE_TREND = "RevenueTrend"
    HISTORICAL_PRICE = "HistoricalPrice"


class MetricClass(str, Enum):
    BULLISH = "Bullish"
    STABLE = "Stable"
    BEARISH = "Bearish"


# Fact budgets per segment: prepared remarks carry more per speech than Q&A turns.
FACT_BUDGETS: dict[Origin, tuple[int, int]] = {
    Origin.PREPARED_REMARKS: (3, 5),
    Origin.QA: (1, 3),
}

DEFAULT_SLOPE_TAU = 0.02

# Display names used when rendering metric classifications into prompts.
_METRIC_DISPLAY = {
    MetricKind.EPS: "EPS",
    MetricKind.REVENUE_TREND: "Revenue Trend",
    MetricKind.HISTORICAL_PRICE: "Historical Price",
}
_METRIC_FROM_DISPLAY = {v: k for k, v in _METRIC_DISPLAY.items()}


class InsufficientHistory(Exception):
    """Metric history has fewer than two points."""


class DistillError(BackendError):
    """A backend call failed during distillation; names the speech."""


@dataclass(frozen=True)
class Fact:
    index: int
    content: str
    origin: Origin
    speaker: str


@dataclass(frozen=True)
class FactTable:
    ticker: str
    facts: tuple[Fact, ...]
    metric_classes: Mapping[MetricKind, MetricClass]


@dataclass(frozen=True)
class SpeechSummary:
    """Distillation outcome for one speech."""

    speech_id: str
    origin: Origin
    budget: tuple[int, int]
    fact_count: int

    @property
    def within_budget(self) -> bool:
        lo, hi = self.budget
        return lo <= self.fact_count <= hi


@dataclass
class DistillationReport:
    """Audit of backend behavior during one table's distillation.

    Budget violations and empty summaries are recorded, never repaired, so the
    backend's actual behavior stays visible downstream.
    """

    speeches: list[SpeechSummary] = field(default_factory=list)

    @property
    def budget_violations(self) -> list[SpeechSummary]:
        return [s for s in self.speeches if not s.within_budget]

    @property
    def empty_summaries(self) -> list[SpeechSummary]:
        return [s for s in self.speeches if s.fact_count == 0]


def fact_budget(segment: Origin) -> tuple[int, int]:
    """(min, max) facts per speech for a segment type."""
    return FACT_BUDGETS[segment]


def render_speech(speech: Speech) -> str:
    """Deterministic plain-text form of one speaker turn for the prompt."""
    body = "\n\n".join(speech.paragraphs)
    return f"{speech.speaker}:\n{body}"


_LIST_MARKER = re.compile(r"^(?:[-*•]+|\d+[.)])\s*")


def parse_fact_lines(text: str) -> list[str]:
    """One fact per nonempty line, with leading list markers stripped."""
    facts = []
    for line in text.splitlines():
        line = _LIST_MARKER.sub("", line.strip()).strip()
        if line:
            facts.append(line)
    return facts


def distill(
    transcript: Transcript,
    backend: LlmBackend,
    template: PromptTemplate,
    metric_classes: Mapping[MetricKind, MetricClass] | None = None,
    concurrency: int = 1,
) -> tuple[FactTable, DistillationReport]:
    """Distill a transcript into a fact table via one backend call per speech.

    Facts keep transcript order (prepared remarks before Q&A, speeches in
    source order) and get contiguous 1-based indices. Backend failures raise
    ``DistillError`` naming the speech; empty summaries are recorded in the
    report, not fatal.
    """
    speeches = [
        (Origin(origin), speech) for origin, speech in executive_speeches(transcript)
    ]

    def summarize(item: tuple[Origin, Speech]) -> list[str]:
        origin, speech = item
        lo, hi = fact_budget(origin)
        slots = {
            "company-ticker": transcript.ticker,
            "number-of-facts": f"{lo}-{hi}",
            "earnings-call-transcript": render_speech(speech),
        }
        return parse_fact_lines(backend.complete(template, slots))

    results: list[list[str]] = []
    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [pool.submit(summarize, item) for item in speeches]
            for i, future in enumerate(futures):
                try:
                    results.append(future.result())
                except BackendError as exc:
                    raise DistillError(f"{_speech_id(speeches, i)}: {exc}") from exc
    else:
        for i, item in enumerate(speeches):
            try:
                results.append(summarize(item))
            except BackendError as exc:
                raise DistillError(f"{_speech_id(speeches, i)}: {exc}") from exc

    report = DistillationReport()
    facts: list[Fact] = []
    for i, ((origin, speech), lines) in enumerate(zip(speeches, results)):
        for line in lines:
            facts.append(
                Fact(
                    index=len(facts) + 1,
                    content=line,
                    origin=origin,
                    speaker=speech.speaker,
                )
            )
        report.speeches.append(
            SpeechSummary(
                speech_id=_speech_id(speeches, i),
                origin=origin,
                budget=fact_budget(origin),
                fact_count=len(lines),
            )
        )

    table = FactTable(
        ticker=transcript.ticker,
        facts=tuple(facts),
        metric_classes=dict(metric_classes or {}),
    )
    return table, report


def _speech_id(speeches: Sequence[tuple[Origin, Speech]], i: int) -> str:
    origin, speech = speeches[i]
    return f"{origin.value}#{i}:{speech.speaker}"


def classify_metric(
    history: Sequence[float],
    kind: MetricKind | None = None,
    tau: float = DEFAULT_SLOPE_TAU,
) -> MetricClass:
    """Bullish/Stable/Bearish from the slope of a least-squares linear fit.

    The slope is normalized by the series' mean absolute level, so the
    threshold ``tau`` reads as "fractional change per step". Above +tau is
    Bullish, below -tau Bearish, otherwise Stable. ``kind`` is accepted for
    call-site clarity; the rule is identical for all three metrics.

    Raises:
        InsufficientHistory: for series with fewer than two points.
    """
    if len(history) < 2:
        raise InsufficientHistory(f"need >= 2 points, got {len(history)}")
    y = np.asarray(history, dtype=float)
    x = np.arange(len(y), dtype=float)
    slope = np.polyfit(x, y, 1)[0]
    scale = float(np.mean(np.abs(y)))
    normalized = 0.0 if scale == 0.0 else slope / scale
    if normalized > tau:
        return MetricClass.BULLISH
    if normalized < -tau:
        return MetricClass.BEARISH
    return MetricClass.STABLE


def classify_metrics(
    histories: Mapping[MetricKind, Sequence[float]],
    tau: float = DEFAULT_SLOPE_TAU,
) -> dict[MetricKind, MetricClass]:
    """Classify all three metric histories; every kind must be present."""
    return {kind: classify_metric(histories[kind], kind, tau) for kind in MetricKind}


# --- rendering and serialization --------------------------------------------

def render_fact_table(table: FactTable) -> str:
    """Plain-text table form used inside decision and reflection prompts.

    Speaker and segment attributions are deliberately not part of this
    surface; ``parse_fact_table`` therefore recovers contents, count, and
    metric classes only (enough for feature extraction), not origins.
    """
    lines = [f"Fact {fact.index}: {fact.content}" for fact in table.facts]
    if table.metric_classes:
        lines.append("Historical Metrics:")
        for kind in MetricKind:
            if kind in table.metric_classes:
                lines.append(f"{_METRIC_DISPLAY[kind]}: {table.metric_classes[kind].value}")
    return "\n".join(lines)


_TABLE_FACT_LINE = re.compile(r"^Fact (\d+): (.*)$")
_TABLE_METRIC_LINE = re.compile(r"^(EPS|Revenue Trend|Historical Price): (\w+)$")


def parse_fact_table(text: str, ticker: str = "") -> FactTable:
    """Rebuild a bare fact table from its rendered text form."""
    facts: list[Fact] = []
    metric_classes: dict[MetricKind, MetricClass] = {}
    for line in text.splitlines():
        m = _TABLE_FACT_LINE.match(line)
        if m:
            facts.append(
                Fact(
                    index=int(m.group(1)),
                    content=m.group(2),
                    origin=Origin.PREPARED_REMARKS,
                    speaker="",
                )
            )
            continue
        m = _TABLE_METRIC_LINE.match(line)
        if m:
            metric_classes[_METRIC_FROM_DISPLAY[m.group(1)]] = MetricClass(m.group(2))
    return FactTable(ticker=ticker, facts=tuple(facts), metric_classes=metric_classes)


def table_to_record(table: FactTable, instance_id: str | None = None) -> dict:
    record = {
        "ticker": table.ticker,
        "facts": [
            {
                "index": f.index,
                "content": f.content,
                "origin": f.origin.value,
                "speaker": f.speaker,
            }
            for f in table.facts
        ],
        "metric_classes": {k.value: v.value for k, v in table.metric_classes.items()},
    }
    if instance_id is not None:
        record["instance_id"] = instance_id
    return record


def table_from_record(record: Mapping) -> FactTable:
    return FactTable(
        ticker=record["ticker"],
        facts=tuple(
            Fact(
                index=f["index"],
                content=f["content"],
                origin=Origin(f["origin"]),
                speaker=f["speaker"],
            )
            for f in record["facts"]
        ),
        metric_classes={
            MetricKind(k): MetricClass(v) for k, v in record["metric_classes"].items()
        },
    )
