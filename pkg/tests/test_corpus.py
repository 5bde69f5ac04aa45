from __future__ import annotations

import json
from datetime import date, timedelta

import pytest
from hypothesis import given, strategies as st

from factdesk.corpus import (
    DEFAULT_THRESHOLDS,
    LABEL_ORDER,
    BadThresholds,
    DecisionLabel,
    EmptySectorWarning,
    MissingPrice,
    PriceRecord,
    Speech,
    Transcript,
    derive_label,
    executive_speeches,
    is_executive,
    label_for_return,
    read_prices,
    read_transcripts,
    split_corpus,
    transcript_from_record,
    transcript_to_record,
    validate_transcript,
    write_jsonl,
)


def series(ticker: str, closes: dict[str, float]) -> list[PriceRecord]:
    return [
        PriceRecord(ticker, date.fromisoformat(d), c) for d, c in closes.items()
    ]


def make_transcript(ticker="ACME", call_date=date(2023, 5, 1), sector="Energy"):
    return Transcript(
        ticker=ticker,
        call_date=call_date,
        sector=sector,
        prepared_remarks=(
            Speech("Dana Flint -- Chief Executive Officer", ("We grew revenue.",)),
        ),
        qa_session=(),
    )


class TestLabelForReturn:
    def test_zero_return_is_hold(self):
        assert label_for_return(0.0) is DecisionLabel.HOLD

    def test_above_top_threshold_is_strongly_buy(self):
        assert label_for_return(0.15) is DecisionLabel.STRONGLY_BUY

    def test_band_edges(self):
        # Bands are (t_k-1, t_k]: each threshold belongs to the band below it.
        assert label_for_return(-0.10) is DecisionLabel.STRONGLY_SELL
        assert label_for_return(-0.02) is DecisionLabel.SELL
        assert label_for_return(0.02) is DecisionLabel.HOLD
        assert label_for_return(0.10) is DecisionLabel.BUY

    def test_each_band_maps_to_exactly_one_label(self):
        probes = [-0.2, -0.05, 0.0, 0.05, 0.2]
        assert [label_for_return(r) for r in probes] == [
            DecisionLabel.STRONGLY_SELL,
            DecisionLabel.SELL,
            DecisionLabel.HOLD,
            DecisionLabel.BUY,
            DecisionLabel.STRONGLY_BUY,
        ]

    @given(
        st.floats(min_value=-0.9, max_value=0.9),
        st.floats(min_value=-0.9, max_value=0.9),
    )
    def test_monotone_in_return(self, r1, r2):
        if r1 > r2:
            r1, r2 = r2, r1
        assert label_for_return(r1).rank <= label_for_return(r2).rank

    def test_bad_thresholds(self):
        with pytest.raises(BadThresholds):
            label_for_return(0.0, thresholds=(-0.1, 0.1, 0.1, 0.2))
        with pytest.raises(BadThresholds):
            label_for_return(0.0, thresholds=(-0.1, 0.0, 0.1))


class TestDeriveLabel:
    def test_planted_minus_five_percent_is_sell(self):
        # Hand check: 95.0 / 100.0 - 1 = -0.05, inside (-0.10, -0.02].
        prices = series("ACME", {"2023-05-01": 100.0, "2023-05-31": 95.0})
        label = derive_label(prices, date(2023, 5, 1), 30, DEFAULT_THRESHOLDS)
        assert label is DecisionLabel.SELL

    def test_rolls_forward_over_non_trading_days(self):
        prices = series("ACME", {"2023-05-02": 100.0, "2023-06-02": 115.0})
        label = derive_label(prices, date(2023, 5, 1), 30)
        assert label is DecisionLabel.STRONGLY_BUY

    def test_missing_start_price(self):
        prices = series("ACME", {"2023-04-01": 100.0})
        with pytest.raises(MissingPrice):
            derive_label(prices, date(2023, 5, 1), 30)

    def test_missing_end_price(self):
        prices = series("ACME", {"2023-05-01": 100.0})
        with pytest.raises(MissingPrice):
            derive_label(prices, date(2023, 5, 1), 30)


class TestExecutiveFilter:
    def test_operator_and_analyst_excluded(self):
        assert not is_executive("Operator")
        assert not is_executive("Jamie Baker -- J.P. Morgan -- Analyst")
        assert not is_executive("Julie Stewart -- Vice President of Investor Relations")

    def test_executives_included(self):
        assert is_executive("Ed Bastian -- Chief Executive Officer")
        assert is_executive("Dan Janki -- CFO")

    def test_executive_speeches_preserve_order(self):
        t = Transcript(
            ticker="DAL",
            call_date=date(2021, 10, 13),
            sector="Industrials",
            prepared_remarks=(
                Speech("Operator", ("Welcome.",)),
                Speech("Ed Bastian -- Chief Executive Officer", ("First.",)),
                Speech("Dan Janki -- Chief Financial Officer", ("Second.",)),
            ),
            qa_session=(
                Speech("Jamie Baker -- J.P. Morgan -- Analyst", ("Question?",)),
                Speech("Glen Hauenstein -- President", ("Answer.",)),
            ),
        )
        kinds_and_speakers = [
            (kind, s.speaker.split(" --")[0]) for kind, s in executive_speeches(t)
        ]
        assert kinds_and_speakers == [
            ("PreparedRemarks", "Ed Bastian"),
            ("PreparedRemarks", "Dan Janki"),
            ("QA", "Glen Hauenstein"),
        ]

    def test_validate_requires_executive_speech(self):
        t = Transcript(
            ticker="ACME",
            call_date=date(2023, 5, 1),
            sector="Energy",
            prepared_remarks=(Speech("Operator", ("Welcome.",)),),
            qa_session=(),
        )
        with pytest.raises(ValueError, match="no executive speech"):
            validate_transcript(t)

    def test_validate_sector(self):
        t = make_transcript(sector="Cryptowidgets")
        with pytest.raises(ValueError, match="unknown sector"):
            validate_transcript(t, sectors=("Energy", "Utilities"))


def corpus_of(sector_sizes: dict[str, int], start=date(2023, 1, 1)) -> list[Transcript]:
    out = []
    for sector, n in sector_sizes.items():
        for i in range(n):
            out.append(
                make_transcript(
                    ticker=f"{sector[:3].upper()}{i}",
                    call_date=start + timedelta(days=i),
                    sector=sector,
                )
            )
    return out


class TestSplitCorpus:
    def test_train_size_counts(self):
        transcripts = corpus_of({"A": 5, "B": 5, "C": 5})
        train, test = split_corpus(transcripts, per_sector=2, test_after=date(2024, 1, 1), seed=0)
        assert len(train) == 6
        assert test == []

    def test_all_recent_means_empty_train(self):
        transcripts = corpus_of({"A": 3}, start=date(2024, 2, 1))
        train, test = split_corpus(transcripts, per_sector=2, test_after=date(2024, 1, 1), seed=0)
        assert train == []
        assert len(test) == 3

    def test_disjoint_and_date_held_out(self):
        transcripts = corpus_of({"A": 4}, start=date(2023, 12, 30))
        train, test = split_corpus(transcripts, per_sector=2, test_after=date(2024, 1, 1), seed=0)
        assert set(t.instance_id for t in train).isdisjoint(t.instance_id for t in test)
        assert all(t.call_date >= date(2024, 1, 1) for t in test)
        assert all(t.call_date < date(2024, 1, 1) for t in train)

    def test_deterministic_under_seed(self, tmp_path):
        transcripts = corpus_of({"A": 9, "B": 7, "C": 11})
        files = []
        for run in range(2):
            train, test = split_corpus(transcripts, per_sector=3, test_after=date(2024, 1, 1), seed=42)
            path = tmp_path / f"split{run}.jsonl"
            write_jsonl(path, [transcript_to_record(t) for t in train + test])
            files.append(path.read_bytes())
        assert files[0] == files[1]

    def test_different_seeds_differ(self):
        transcripts = corpus_of({"A": 30})
        train1, _ = split_corpus(transcripts, per_sector=5, test_after=date(2024, 1, 1), seed=1)
        train2, _ = split_corpus(transcripts, per_sector=5, test_after=date(2024, 1, 1), seed=2)
        assert {t.instance_id for t in train1} != {t.instance_id for t in train2}

    def test_small_sector_warns_and_keeps_all(self):
        transcripts = corpus_of({"A": 2, "B": 5})
        with pytest.warns(EmptySectorWarning, match="'A'"):
            train, _ = split_corpus(transcripts, per_sector=4, test_after=date(2024, 1, 1), seed=0)
        assert sum(1 for t in train if t.sector == "A") == 2
        assert sum(1 for t in train if t.sector == "B") == 4

    def test_per_sector_must_be_positive(self):
        with pytest.raises(ValueError):
            split_corpus([], per_sector=0, test_after=date(2024, 1, 1), seed=0)


class TestSerialization:
    def test_transcript_round_trip(self, tmp_path):
        t = make_transcript()
        path = tmp_path / "transcripts.jsonl"
        write_jsonl(path, [transcript_to_record(t, DecisionLabel.BUY)])
        loaded = read_transcripts(path)
        assert loaded == [t]
        record = json.loads(path.read_text().strip())
        assert record["label"] == "B"

    def test_record_round_trip_identity(self):
        t = make_transcript()
        assert transcript_from_record(transcript_to_record(t)) == t

    def test_read_prices_rejects_duplicates(self, tmp_path):
        path = tmp_path / "prices.csv"
        path.write_text("ticker,date,close\nACME,2023-05-01,10\nACME,2023-05-01,11\n")
        with pytest.raises(ValueError, match="duplicate"):
            read_prices(path)

    def test_read_prices_rejects_nonpositive(self, tmp_path):
        path = tmp_path / "prices.csv"
        path.write_text("ticker,date,close\nACME,2023-05-01,0\n")
        with pytest.raises(ValueError, match="positive"):
            read_prices(path)

    def test_read_prices_sorted_by_date(self, tmp_path):
        path = tmp_path / "prices.csv"
        path.write_text(
            "ticker,date,close\nACME,2023-05-03,11\nACME,2023-05-01,10\n"
        )
        prices = read_prices(path)
        assert [p.date.day for p in prices["ACME"]] == [1, 3]


def test_label_order_covers_all_five():
    assert len(LABEL_ORDER) == 5
    assert {label.value for label in LABEL_ORDER} == {"SB", "B", "H", "S", "SS"}
    ranks = [label.rank for label in LABEL_ORDER]
    assert ranks == [4, 3, 2, 1, 0]
