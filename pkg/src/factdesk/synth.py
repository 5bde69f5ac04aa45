"""Synthetic corpora and scripted-backend planners.

Everything here is deterministic under a seed. The backend planners register
responses keyed by the same fingerprints the engine will request: they build
prompts through the engine's own rendering functions and rely on the
parse/render round-trip, so a planned chain replays exactly.
"""

from __future__ import annotations

import random
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backend import PromptTemplate, ScriptedBackend, fingerprint
from .corpus import (
    DEFAULT_SECTORS,
    DEFAULT_THRESHOLDS,
    LABEL_ORDER,
    DecisionLabel,
    PriceRecord,
    Speech,
    Transcript,
    executive_speeches,
    transcript_to_record,
    write_jsonl,
)
from .explanation import (
    DEFAULT_FACT_RANGE,
    SelectedFact,
    Sign,
    Strength,
    StructuredExplanation,
    render_explanation,
)
from .facttable import (
    FactTable,
    Fact,
    MetricClass,
    MetricKind,
    Origin,
    classify_metrics,
    distill,
    fact_budget,
    render_fact_table,
    render_speech,
)
from .reflect import (
    Attempt,
    ComparisonPair,
    ReflectionTrace,
    Termination,
    render_history,
)

# Mid-band returns that map to each label under the default thresholds.
BAND_RETURNS: dict[DecisionLabel, float] = {
    DecisionLabel.STRONGLY_SELL: -0.15,
    DecisionLabel.SELL: -0.05,
    DecisionLabel.HOLD: 0.0,
    DecisionLabel.BUY: 0.05,
    DecisionLabel.STRONGLY_BUY: 0.15,
}

_TOPICS = (
    "cloud revenue", "hardware margins", "subscription churn", "free cash flow",
    "unit volumes", "operating costs", "new product uptake", "regional demand",
    "supply chain", "guidance range", "buyback program", "hiring plans",
)

_STABLE_METRICS = {
    MetricKind.EPS: MetricClass.STABLE,
    MetricKind.REVENUE_TREND: MetricClass.STABLE,
    MetricKind.HISTORICAL_PRICE: MetricClass.STABLE,
}


def make_table(
    ticker: str,
    n_facts: int,
    metric_classes: Mapping[MetricKind, MetricClass] | None = None,
    seed: int = 0,
) -> FactTable:
    """Synthetic fact table with deterministic one-sentence facts."""
    rng = random.Random(seed)
    facts = tuple(
        Fact(
            index=i,
            content=f"{ticker} reported {rng.choice(_TOPICS)} detail {i} this quarter.",
            origin=Origin.PREPARED_REMARKS if i % 3 else Origin.QA,
            speaker="Alex Vernon -- Chief Executive Officer",
        )
        for i in range(1, n_facts + 1)
    )
    return FactTable(
        ticker=ticker,
        facts=facts,
        metric_classes=dict(metric_classes or _STABLE_METRICS),
    )


def make_explanation(
    table: FactTable,
    decision: DecisionLabel,
    rng: random.Random,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    n_negative: int = 1,
    magnitudes: Sequence[int] | None = None,
) -> StructuredExplanation:
    """Valid random explanation over a table: balanced signs, in-range count."""
    lo, hi = fact_range
    n_selected = rng.randint(lo, min(hi, len(table.facts)))
    n_negative = max(n_negative, -(-n_selected // 10))  # stay under the skew threshold
    n_negative = min(n_negative, n_selected - 1)
    indices = rng.sample(range(1, len(table.facts) + 1), n_selected)
    selected = []
    for pos, index in enumerate(indices):
        sign = Sign.NEGATIVE if pos < n_negative else Sign.POSITIVE
        magnitude = magnitudes[pos % len(magnitudes)] if magnitudes else rng.randint(1, 3)
        selected.append(
            SelectedFact(
                fact_index=index,
                content=table.facts[index - 1].content,
                strength=Strength(sign=sign, magnitude=magnitude),
            )
        )
    return StructuredExplanation(
        selected=tuple(selected),
        decision=decision,
        justification=f"The balance of the selected facts points to {decision.text}.",
    )


def random_explanations(
    table: FactTable,
    n: int,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    seed: int = 0,
) -> list[StructuredExplanation]:
    """Round-trip fodder: covers all five decisions, both signs at every
    magnitude, and selection counts across the whole range."""
    lo, hi = fact_range
    rng = random.Random(seed)
    out = []
    for i in range(n):
        decision = LABEL_ORDER[i % len(LABEL_ORDER)]
        n_selected = lo + i % (hi - lo + 1)
        indices = rng.sample(range(1, len(table.facts) + 1), n_selected)
        selected = []
        for pos, index in enumerate(indices):
            sign = Sign.POSITIVE if (pos + i) % 2 == 0 else Sign.NEGATIVE
            magnitude = 1 + (pos + i) % 3
            selected.append(
                SelectedFact(
                    fact_index=index,
                    content=table.facts[index - 1].content,
                    strength=Strength(sign=sign, magnitude=magnitude),
                )
            )
        out.append(
            StructuredExplanation(
                selected=tuple(selected),
                decision=decision,
                justification=f"Synthetic rationale {i} weighing both sides.",
            )
        )
    return out


def make_trace(
    instance_id: str,
    table: FactTable,
    gold: DecisionLabel,
    decisions: Sequence[DecisionLabel],
    seed: int = 0,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
) -> ReflectionTrace:
    """Trace with a planted decision path; solved iff the last decision is gold.

    Decisions before the last must differ from gold (a correct attempt would
    have stopped the loop).
    """
    if any(d == gold for d in decisions[:-1]):
        raise ValueError("only the final decision may equal gold")
    rng = random.Random(seed)
    attempts = []
    for d in decisions:
        explanation = make_explanation(table, d, rng, fact_range)
        attempts.append(
            Attempt(
                explanation=explanation,
                correct=d == gold,
                raw_response=render_explanation(explanation),
            )
        )
    terminated = Termination.SOLVED if decisions[-1] == gold else Termination.EXHAUSTED
    return ReflectionTrace(
        instance_id=instance_id,
        table=table,
        gold=gold,
        attempts=tuple(attempts),
        terminated=terminated,
    )


def make_path_corpus(
    planted: Mapping[tuple[str, ...], int],
    total: int,
    seed: int = 0,
) -> list[ReflectionTrace]:
    """Trace corpus with planted correct-path counts, padded to ``total``
    with exhausted filler traces on paths disjoint from the planted ones.

    ``planted`` maps decision-value paths (ending at that trace's gold) to
    trace counts, e.g. ``{("B", "H"): 101}``.
    """
    table = make_table("PATH", 12, seed=seed)
    traces: list[ReflectionTrace] = []
    for path_values, count in planted.items():
        path = tuple(DecisionLabel(v) for v in path_values)
        for i in range(count):
            traces.append(
                make_trace(
                    f"planted:{'-'.join(path_values)}:{i}",
                    table,
                    gold=path[-1],
                    decisions=path,
                    seed=seed + len(traces),
                )
            )
    fillers = (
        ("B", "H", "S", "SB", "B"),
        ("H", "B", "SB", "S", "H"),
        ("S", "H", "B", "SB", "S"),
    )
    i = 0
    while len(traces) < total:
        path = tuple(DecisionLabel(v) for v in fillers[i % len(fillers)])
        traces.append(
            make_trace(
                f"filler:{i}",
                table,
                gold=DecisionLabel.STRONGLY_SELL,
                decisions=path,
                seed=seed + 10_000 + i,
            )
        )
        i += 1
    if len(traces) != total:
        raise ValueError(f"planted counts exceed total: {len(traces)} > {total}")
    return traces


def make_stats_corpus(
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
) -> tuple[list[StructuredExplanation], list[FactTable]]:
    """100-instance corpus with exact per-instance count sums.

    Tables: 92 of 40 facts, 8 of 39 (mean 39.92). Favorable selections by
    magnitude sum to 100/453/248 (mean 1.00/4.53/2.48, total 8.01); adverse
    sum to 58/29/23 (mean 0.58/0.29/0.23, total 1.10); overall mean 9.11
    selections, all within the configured range with both signs present.
    """
    n = 100
    fav2 = [0] * n
    fav3 = [0] * n
    adv = [[0, 0, 0] for _ in range(n)]
    for i in range(n):
        adv[i][0] = 1 if i < 58 else 0
        adv[i][1] = 1 if 58 <= i < 87 else 0
        adv[i][2] = 1 if i >= 87 else 0
    for i in range(10):
        adv[i][2] += 1  # ten instances carry a second adverse fact
        fav2[i] = 4
        fav3[i] = 2
    # Remaining magnitude-2 fives (53) and magnitude-3 threes (48) go to 10..99.
    for i in range(10, 63):
        fav2[i] = 5
    for i in range(63, n):
        fav2[i] = 4
    for i in range(10, 58):
        fav3[i] = 3
    for i in range(58, n):
        fav3[i] = 2

    explanations: list[StructuredExplanation] = []
    tables: list[FactTable] = []
    for i in range(n):
        table = make_table(f"STAT{i:03d}", 39 if i < 8 else 40, seed=i)
        counts = [(Sign.POSITIVE, 1, 1), (Sign.POSITIVE, 2, fav2[i]), (Sign.POSITIVE, 3, fav3[i])]
        counts += [(Sign.NEGATIVE, m + 1, adv[i][m]) for m in range(3)]
        selected = []
        index = 1
        for sign, magnitude, count in counts:
            for _ in range(count):
                selected.append(
                    SelectedFact(
                        fact_index=index,
                        content=table.facts[index - 1].content,
                        strength=Strength(sign=sign, magnitude=magnitude),
                    )
                )
                index += 1
        lo, hi = fact_range
        if not lo <= len(selected) <= hi:
            raise AssertionError(f"instance {i} selects {len(selected)} facts")
        explanations.append(
            StructuredExplanation(
                selected=tuple(selected),
                decision=LABEL_ORDER[i % len(LABEL_ORDER)],
                justification=f"Planted summary instance {i}.",
            )
        )
        tables.append(table)
    return explanations, tables


# --- planted preference pairs ---------------------------------------------------

def make_planted_pairs(
    n_pairs: int,
    seed: int = 0,
    utility: np.ndarray | None = None,
    min_margin: float = 1.0,
) -> tuple[list[ComparisonPair], np.ndarray]:
    """Comparison pairs labeled by a planted linear utility over the embedding.

    Each pair shares a table; the side with the higher utility is preferred.
    Candidate pairs whose utilities differ by less than ``min_margin`` are
    resampled: near-ties express no decisive preference, so they carry no
    recovery signal (the planted utility's typical gap is a few units).
    Returns the pairs and the utility vector.
    """
    from .learn import FEATURE_DIM, embed  # local import to avoid a module cycle

    rng = random.Random(seed)
    np_rng = np.random.default_rng(seed)
    w = utility if utility is not None else np_rng.normal(size=FEATURE_DIM)

    classes = list(MetricClass)
    pairs: list[ComparisonPair] = []
    while len(pairs) < n_pairs:
        table = make_table(
            f"PAIR{len(pairs):04d}",
            rng.randint(30, 50),
            metric_classes={kind: rng.choice(classes) for kind in MetricKind},
            seed=rng.randrange(1 << 30),
        )
        a = make_explanation(table, rng.choice(LABEL_ORDER), rng, n_negative=rng.randint(1, 3))
        b = make_explanation(table, rng.choice(LABEL_ORDER), rng, n_negative=rng.randint(1, 3))
        margin = float(w @ (embed(table, a) - embed(table, b)))
        if abs(margin) < min_margin or margin == 0.0:
            continue
        preferred, rejected = (a, b) if margin > 0 else (b, a)
        pairs.append(
            ComparisonPair(
                instance_id=table.ticker,
                input=table,
                preferred=preferred,
                rejected=rejected,
            )
        )
    return pairs, w


# --- scripted pipeline corpora ---------------------------------------------------

_EXECUTIVES = (
    "Alex Vernon -- Chief Executive Officer",
    "Pat Morgan -- Chief Financial Officer",
    "Sam Reyes -- President",
)
_NON_EXECUTIVES = (
    "Operator",
    "Jordan Lee -- Bryant Capital -- Analyst",
)

_METRIC_SERIES = {
    MetricClass.BULLISH: [10.0, 11.0, 12.0, 13.0],
    MetricClass.STABLE: [10.0, 10.0, 10.0, 10.0],
    MetricClass.BEARISH: [13.0, 12.0, 11.0, 10.0],
}


def make_transcript(
    ticker: str,
    call_date: date,
    sector: str,
    n_prepared: int = 8,
    n_qa: int = 4,
    seed: int = 0,
) -> Transcript:
    """Synthetic call: executive speeches plus an operator and an analyst turn."""
    rng = random.Random(seed)

    def speech(kind: str, i: int) -> Speech:
        speaker = _EXECUTIVES[i % len(_EXECUTIVES)]
        paragraphs = tuple(
            f"{ticker} {kind} remark {i}.{j}: {rng.choice(_TOPICS)} developed as expected."
            for j in range(2)
        )
        return Speech(speaker=speaker, paragraphs=paragraphs)

    prepared = (Speech(speaker=_NON_EXECUTIVES[0], paragraphs=("Welcome to the call.",)),)
    prepared += tuple(speech("prepared", i) for i in range(n_prepared))
    qa = (Speech(speaker=_NON_EXECUTIVES[1], paragraphs=("Could you expand on margins?",)),)
    qa += tuple(speech("qa", i) for i in range(n_qa))
    return Transcript(
        ticker=ticker,
        call_date=call_date,
        sector=sector,
        prepared_remarks=prepared,
        qa_session=qa,
    )


def scripted_fact_lines(ticker: str, origin: Origin, speech_index: int) -> list[str]:
    """Deterministic distillation output: 4 facts per prepared-remarks speech,
    2 per Q&A turn (inside the 3-5 and 1-3 budgets)."""
    count = 4 if origin is Origin.PREPARED_REMARKS else 2
    return [
        f"{ticker} {origin.value} speech {speech_index} key fact {j}: "
        f"{_TOPICS[(speech_index + j) % len(_TOPICS)]} moved the quarter."
        for j in range(count)
    ]


def build_distill_script(
    transcripts: Sequence[Transcript],
    template: PromptTemplate,
    script: dict[str, str],
) -> None:
    """Register one distillation response per executive speech."""
    for transcript in transcripts:
        for i, (origin_name, speech) in enumerate(executive_speeches(transcript)):
            origin = Origin(origin_name)
            lo, hi = fact_budget(origin)
            slots = {
                "company-ticker": transcript.ticker,
                "number-of-facts": f"{lo}-{hi}",
                "earnings-call-transcript": render_speech(speech),
            }
            lines = scripted_fact_lines(transcript.ticker, origin, i)
            script[fingerprint(template.name, slots)] = "\n".join(lines)


def plan_decisions(
    gold: DecisionLabel, solve_round: int, rng: random.Random
) -> list[DecisionLabel]:
    """Distinct-decision sequence ending at gold after ``solve_round`` reflections."""
    others = [label for label in LABEL_ORDER if label != gold]
    rng.shuffle(others)
    return others[:solve_round] + [gold]


def build_decision_script(
    table: FactTable,
    decisions: Sequence[DecisionLabel],
    templates: Mapping[str, PromptTemplate],
    fact_range: tuple[int, int],
    script: dict[str, str],
    seed: int = 0,
) -> list[StructuredExplanation]:
    """Register the decision response and the reflection chain for one
    planned sequence; returns the planned explanations."""
    lo, hi = fact_range
    rng = random.Random(seed)
    explanations = [make_explanation(table, d, rng, fact_range) for d in decisions]

    decision_slots = {
        "company-ticker": table.ticker,
        "min-facts": str(lo),
        "max-facts": str(hi),
        "fact-table": render_fact_table(table),
    }
    script[fingerprint(templates["decision"].name, decision_slots)] = render_explanation(
        explanations[0]
    )
    for j in range(1, len(decisions)):
        slots = {
            "min-facts": str(lo),
            "max-facts": str(hi),
            "fact-table": render_fact_table(table),
            "previous-incorrect-outputs": render_history(explanations[:j]),
            "attempt": "0",
        }
        script[fingerprint(templates["reflection"].name, slots)] = render_explanation(
            explanations[j]
        )
    return explanations


def build_reflection_corpus(
    n_instances: int,
    templates: Mapping[str, PromptTemplate],
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    seed: int = 0,
    max_reflections: int = 4,
    n_facts: int = 40,
) -> tuple[list[tuple[str, FactTable, DecisionLabel]], ScriptedBackend]:
    """Instances plus a scripted backend honoring the distinct-decision
    constraint, with solve rounds cycling 0..max_reflections."""
    rng = random.Random(seed)
    script: dict[str, str] = {}
    instances = []
    for i in range(n_instances):
        table = make_table(f"REFL{i:03d}", n_facts, seed=seed + i)
        gold = LABEL_ORDER[i % len(LABEL_ORDER)]
        solve_round = i % (max_reflections + 1)
        decisions = plan_decisions(gold, solve_round, rng)
        build_decision_script(table, decisions, templates, fact_range, script, seed=seed + i)
        instances.append((f"refl:{i}", table, gold))
    return instances, ScriptedBackend(script)


# --- demo corpus on disk ----------------------------------------------------------

def write_demo_corpus(
    directory: str | Path,
    templates: Mapping[str, PromptTemplate],
    n_instances: int = 10,
    seed: int = 7,
    fact_range: tuple[int, int] = DEFAULT_FACT_RANGE,
    sweep_ranges: Sequence[tuple[int, int]] = ((3, 6), (6, 10), (10, 15)),
    max_reflections: int = 4,
    horizon_days: int = 30,
) -> dict[str, Path]:
    """Self-contained offline corpus: transcripts, prices, metric histories,
    a scripted backend covering the full pipeline (all sweep ranges included),
    and a run config with paths relative to the directory."""
    if n_instances > len(DEFAULT_SECTORS):
        raise ValueError("demo corpus supports at most one instance per sector")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    transcripts: list[Transcript] = []
    golds: dict[str, DecisionLabel] = {}
    price_rows: list[PriceRecord] = []
    metric_records: list[dict] = []
    histories_by_ticker: dict[str, dict[MetricKind, list[float]]] = {}

    for i in range(n_instances):
        ticker = f"DEMO{i:02d}"
        call_date = date(2023, 3, 1) + timedelta(days=17 * i)
        sector = DEFAULT_SECTORS[i % len(DEFAULT_SECTORS)]
        transcript = make_transcript(ticker, call_date, sector, seed=seed + i)
        transcripts.append(transcript)

        gold = LABEL_ORDER[i % len(LABEL_ORDER)]
        golds[transcript.instance_id] = gold
        r = BAND_RETURNS[gold]
        price_rows.append(PriceRecord(ticker, call_date, 100.0))
        price_rows.append(
            PriceRecord(ticker, call_date + timedelta(days=horizon_days), 100.0 * (1.0 + r))
        )

        histories = {
            kind: list(_METRIC_SERIES[rng.choice(list(MetricClass))]) for kind in MetricKind
        }
        histories_by_ticker[ticker] = histories
        metric_records.append(
            {"ticker": ticker, **{kind.value: histories[kind] for kind in histories}}
        )

    # One held-out-by-date transcript exercising the test split.
    held = make_transcript("HELD00", date(2024, 2, 1), DEFAULT_SECTORS[0], seed=seed + 999)
    transcripts.append(held)
    golds[held.instance_id] = DecisionLabel.HOLD
    price_rows.append(PriceRecord("HELD00", held.call_date, 100.0))
    price_rows.append(
        PriceRecord("HELD00", held.call_date + timedelta(days=horizon_days), 100.0)
    )
    histories_by_ticker["HELD00"] = {kind: list(_METRIC_SERIES[MetricClass.STABLE]) for kind in MetricKind}
    metric_records.append(
        {"ticker": "HELD00", **{k.value: histories_by_ticker["HELD00"][k] for k in MetricKind}}
    )

    # Script distillation, then replay it to get the engine's exact tables.
    script: dict[str, str] = {}
    build_distill_script(transcripts, templates["fact_table"], script)
    replay = ScriptedBackend(script)
    ranges = []
    for candidate in (*sweep_ranges, fact_range):
        if tuple(candidate) not in ranges:
            ranges.append(tuple(candidate))
    for i, transcript in enumerate(transcripts):
        metric_classes = classify_metrics(histories_by_ticker[transcript.ticker])
        table, _ = distill(transcript, replay, templates["fact_table"], metric_classes)
        gold = golds[transcript.instance_id]
        solve_round = i % max_reflections + 1 if i % 3 else 0
        for selection_range in ranges:
            plan_rng = random.Random(seed * 1_000 + i)
            decisions = plan_decisions(gold, solve_round, plan_rng)
            build_decision_script(
                table, decisions, templates, selection_range, script, seed=seed * 1_000 + i
            )

    paths = {
        "transcripts": directory / "transcripts.jsonl",
        "prices": directory / "prices.csv",
        "metrics": directory / "metrics.jsonl",
        "script": directory / "script.jsonl",
        "config": directory / "run.cfg",
    }
    write_jsonl(paths["transcripts"], [transcript_to_record(t) for t in transcripts])
    with open(paths["prices"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("ticker,date,close\n")
        for row in sorted(price_rows, key=lambda p: (p.ticker, p.date)):
            fh.write(f"{row.ticker},{row.date.isoformat()},{row.close!r}\n")
    write_jsonl(paths["metrics"], metric_records)
    ScriptedBackend(script).save(paths["script"])

    lo, hi = fact_range
    config_lines = [
        f"seed = {seed}",
        "backend = scripted",
        "corpus = transcripts.jsonl",
        "prices = prices.csv",
        "metrics = metrics.jsonl",
        "script = script.jsonl",
        f"fact_range = {lo},{hi}",
        f"max_reflections = {max_reflections}",
        f"horizon_days = {horizon_days}",
        "thresholds = " + ",".join(repr(t) for t in DEFAULT_THRESHOLDS),
        "per_sector = 1",
        "test_after = 2024-01-01",
    ]
    paths["config"].write_text("\n".join(config_lines) + "\n", encoding="utf-8")
    return paths
