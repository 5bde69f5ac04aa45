"""Transcript corpus handling: ingestion, ground-truth labels, and train/test splits.

Ground truth is derived from the stock's close-to-close return over a fixed
horizon after the call, mapped through four ascending thresholds into the five
decision classes. Splits are sector-balanced on the training side and
date-held-out on the test side, deterministic under a seed.
"""

from __future__ import annotations

import csv
import json
import random
import warnings
from dataclasses import dataclass
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class DecisionLabel(str, Enum):
    """Five-way investment decision."""

    STRONGLY_BUY = "SB"
    BUY = "B"
    HOLD = "H"
    SELL = "S"
    STRONGLY_SELL = "SS"

    @property
    def rank(self) -> int:
        """Position on the bearish-to-bullish axis: SS=0 < S < H < B < SB=4."""
        return _RANK[self]

    @property
    def text(self) -> str:
        """Canonical long form, e.g. ``Strongly Buy``."""
        return _LONG_FORM[self]


# Canonical ordering used for one-hot encodings, confusion matrices, and reports.
LABEL_ORDER: tuple[DecisionLabel, ...] = (
    DecisionLabel.STRONGLY_BUY,
    DecisionLabel.BUY,
    DecisionLabel.HOLD,
    DecisionLabel.SELL,
    DecisionLabel.STRONGLY_SELL,
)

_RANK = {
    DecisionLabel.STRONGLY_SELL: 0,
    DecisionLabel.SELL: 1,
    DecisionLabel.HOLD: 2,
    DecisionLabel.BUY: 3,
    DecisionLabel.STRONGLY_BUY: 4,
}

_LONG_FORM = {
    DecisionLabel.STRONGLY_BUY: "Strongly Buy",
    DecisionLabel.BUY: "Buy",
    DecisionLabel.HOLD: "Hold",
    DecisionLabel.SELL: "Sell",
    DecisionLabel.STRONGLY_SELL: "Strongly Sell",
}

# Return thresholds separating SS | S | H | B | SB. The true class boundaries
# used to label the original dataset are not published; these symmetric bands
# with a narrow Hold band are a configurable default, not a claim of fidelity.
DEFAULT_THRESHOLDS: tuple[float, float, float, float] = (-0.10, -0.02, 0.02, 0.10)

DEFAULT_HORIZON_DAYS = 30

# Standard 11-sector taxonomy; configurable because the source taxonomy is unnamed.
DEFAULT_SECTORS: tuple[str, ...] = (
    "Energy",
    "Materials",
    "Industrials",
    "Consumer Discretionary",
    "Consumer Staples",
    "Health Care",
    "Financials",
    "Information Technology",
    "Communication Services",
    "Utilities",
    "Real Estate",
)

# Speaker patterns treated as call organizers/analysts rather than executives.
DEFAULT_NON_EXECUTIVE_PATTERNS: tuple[str, ...] = (
    "operator",
    "analyst",
    "investor relations",
)


class CorpusError(Exception):
    """Base class for corpus-level failures."""


class MissingPrice(CorpusError):
    """No close available on or after a required date."""


class BadThresholds(CorpusError):
    """Label thresholds are not strictly ascending."""


class EmptySectorWarning(UserWarning):
    """A sector holds fewer transcripts than the requested per-sector quota."""


@dataclass(frozen=True)
class Speech:
    """One speaker turn: the speaker string and their paragraphs in order."""

    speaker: str
    paragraphs: tuple[str, ...]


@dataclass(frozen=True)
class Transcript:
    ticker: str
    call_date: date
    sector: str
    prepared_remarks: tuple[Speech, ...]
    qa_session: tuple[Speech, ...]

    @property
    def instance_id(self) -> str:
        return f"{self.ticker}:{self.call_date.isoformat()}"


@dataclass(frozen=True)
class PriceRecord:
    ticker: str
    date: date
    close: float


def is_executive(speaker: str, patterns: Sequence[str] = DEFAULT_NON_EXECUTIVE_PATTERNS) -> bool:
    """Whether a speaker string looks like a company executive.

    Call organizers and sell-side analysts are filtered out of distillation;
    everyone else (CEO, CFO, president, ...) counts as an executive.
    """
    lowered = speaker.lower()
    return not any(p in lowered for p in patterns)


def executive_speeches(transcript: Transcript) -> list[tuple[str, Speech]]:
    """Executive speeches in source order, tagged ``PreparedRemarks`` / ``QA``."""
    out: list[tuple[str, Speech]] = []
    for speech in transcript.prepared_remarks:
        if is_executive(speech.speaker):
            out.append(("PreparedRemarks", speech))
    for speech in transcript.qa_session:
        if is_executive(speech.speaker):
            out.append(("QA", speech))
    return out


def validate_transcript(transcript: Transcript, sectors: Sequence[str] | None = None) -> None:
    """Raise ``ValueError`` if the transcript violates its invariants."""
    if not transcript.ticker:
        raise ValueError("transcript ticker must be nonempty")
    if not executive_speeches(transcript):
        raise ValueError(f"{transcript.instance_id}: no executive speech present")
    if sectors is not None and transcript.sector not in sectors:
        raise ValueError(
            f"{transcript.instance_id}: unknown sector {transcript.sector!r}"
        )


def label_for_return(r: float, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> DecisionLabel:
    """Map a realized return through four ascending thresholds to a label.

    r <= t1 -> SS, t1 < r <= t2 -> S, t2 < r <= t3 -> H, t3 < r <= t4 -> B,
    r > t4 -> SB.
    """
    t1, t2, t3, t4 = _check_thresholds(thresholds)
    if r <= t1:
        return DecisionLabel.STRONGLY_SELL
    if r <= t2:
        return DecisionLabel.SELL
    if r <= t3:
        return DecisionLabel.HOLD
    if r <= t4:
        return DecisionLabel.BUY
    return DecisionLabel.STRONGLY_BUY


def _check_thresholds(thresholds: Sequence[float]) -> tuple[float, float, float, float]:
    if len(thresholds) != 4:
        raise BadThresholds(f"expected 4 thresholds, got {len(thresholds)}")
    t1, t2, t3, t4 = thresholds
    if not (t1 < t2 < t3 < t4):
        raise BadThresholds(f"thresholds must be strictly ascending, got {tuple(thresholds)}")
    return t1, t2, t3, t4


def _close_on_or_after(prices: Sequence[PriceRecord], day: date) -> float | None:
    """Close at the nearest trading day on or after ``day``, rolling forward."""
    best: PriceRecord | None = None
    for rec in prices:
        if rec.date >= day and (best is None or rec.date < best.date):
            best = rec
    return None if best is None else best.close


def derive_label(
    prices: Sequence[PriceRecord],
    call_date: date,
    horizon_days: int = DEFAULT_HORIZON_DAYS,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> DecisionLabel:
    """Ground-truth decision from post-call price performance.

    The return is computed between the nearest closes on or after the call
    date and on or after ``call_date + horizon_days`` (weekends/holidays roll
    forward to the next available close).

    Raises:
        MissingPrice: if either endpoint has no close on or after its date.
        BadThresholds: if the thresholds are not strictly ascending.
    """
    _check_thresholds(thresholds)
    start = _close_on_or_after(prices, call_date)
    if start is None:
        raise MissingPrice(f"no close on or after {call_date.isoformat()}")
    end = _close_on_or_after(prices, call_date + timedelta(days=horizon_days))
    if end is None:
        raise MissingPrice(
            f"no close on or after {(call_date + timedelta(days=horizon_days)).isoformat()}"
        )
    return label_for_return(end / start - 1.0, thresholds)


def split_corpus(
    transcripts: Sequence[Transcript],
    per_sector: int,
    test_after: date,
    seed: int,
) -> tuple[list[Transcript], list[Transcript]]:
    """Sector-balanced train set and date-held-out test set.

    Every transcript dated on or after ``test_after`` goes to the test set.
    From the remainder, up to ``per_sector`` transcripts are sampled per
    sector, deterministically under ``seed``. Sectors with fewer candidates
    than the quota contribute what they have and raise ``EmptySectorWarning``.
    """
    if per_sector < 1:
        raise ValueError("per_sector must be >= 1")

    test = sorted(
        (t for t in transcripts if t.call_date >= test_after),
        key=lambda t: (t.call_date, t.ticker),
    )
    pool: dict[str, list[Transcript]] = {}
    for t in transcripts:
        if t.call_date < test_after:
            pool.setdefault(t.sector, []).append(t)

    rng = random.Random(seed)
    train: list[Transcript] = []
    for sector in sorted(pool):
        candidates = sorted(pool[sector], key=lambda t: (t.call_date, t.ticker))
        if len(candidates) < per_sector:
            warnings.warn(
                f"sector {sector!r} has {len(candidates)} transcripts, "
                f"fewer than per_sector={per_sector}",
                EmptySectorWarning,
            )
            picked = candidates
        else:
            picked = rng.sample(candidates, per_sector)
        train.extend(picked)
    train.sort(key=lambda t: (t.sector, t.call_date, t.ticker))
    return train, test


# --- serialization ---------------------------------------------------------

def _speech_to_record(speech: Speech) -> dict:
    return {"speaker": speech.speaker, "speech": list(speech.paragraphs)}


def _speech_from_record(record: Mapping) -> Speech:
    return Speech(speaker=record["speaker"], paragraphs=tuple(record["speech"]))


def transcript_to_record(t: Transcript, label: DecisionLabel | None = None) -> dict:
    record = {
        "ticker": t.ticker,
        "call_date": t.call_date.isoformat(),
        "sector": t.sector,
        "prepared_remarks": [_speech_to_record(s) for s in t.prepared_remarks],
        "qa_session": [_speech_to_record(s) for s in t.qa_session],
    }
    if label is not None:
        record["label"] = label.value
    return record


def transcript_from_record(record: Mapping) -> Transcript:
    return Transcript(
        ticker=record["ticker"],
        call_date=date.fromisoformat(record["call_date"]),
        sector=record["sector"],
        prepared_remarks=tuple(_speech_from_record(s) for s in record["prepared_remarks"]),
        qa_session=tuple(_speech_from_record(s) for s in record["qa_session"]),
    )


def read_transcripts(path: str | Path) -> list[Transcript]:
    """Load transcripts from a line-delimited UTF-8 file, one object per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(transcript_from_record(json.loads(line)))
    return out


def read_labels(path: str | Path) -> dict[str, DecisionLabel]:
    """Instance-id -> gold label map from a split file carrying ``label`` fields."""
    labels: dict[str, DecisionLabel] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "label" in record:
                key = f"{record['ticker']}:{record['call_date']}"
                labels[key] = DecisionLabel(record["label"])
    return labels


def read_prices(path: str | Path) -> dict[str, list[PriceRecord]]:
    """Load a price table (header row: ticker,date,close) grouped by ticker.

    Raises ``ValueError`` on duplicate (ticker, date) pairs or non-positive
    closes.
    """
    by_ticker: dict[str, list[PriceRecord]] = {}
    seen: set[tuple[str, date]] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rec = PriceRecord(
                ticker=row["ticker"],
                date=date.fromisoformat(row["date"]),
                close=float(row["close"]),
            )
            if rec.close <= 0:
                raise ValueError(f"close must be positive: {row}")
            key = (rec.ticker, rec.date)
            if key in seen:
                raise ValueError(f"duplicate price record for {key}")
            seen.add(key)
            by_ticker.setdefault(rec.ticker, []).append(rec)
    for series in by_ticker.values():
        series.sort(key=lambda r: r.date)
    return by_ticker


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
