from __future__ import annotations

import random

import pytest

from factdesk.backend import default_template_dir, load_templates
from factdesk.corpus import DecisionLabel
from factdesk.facttable import MetricClass, MetricKind
from factdesk.synth import make_explanation, make_table


@pytest.fixture(scope="session")
def templates():
    return load_templates(default_template_dir())


@pytest.fixture
def table():
    return make_table(
        "ACME",
        40,
        metric_classes={
            MetricKind.EPS: MetricClass.BULLISH,
            MetricKind.REVENUE_TREND: MetricClass.STABLE,
            MetricKind.HISTORICAL_PRICE: MetricClass.BEARISH,
        },
        seed=1,
    )


@pytest.fixture
def hold_explanation(table):
    return make_explanation(table, DecisionLabel.HOLD, random.Random(0))
