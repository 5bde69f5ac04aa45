"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; tolerances are asserted inline.
"""

from __future__ import annotations

import warnings
from time import perf_counter

import numpy as np
import pytest

from factdesk.backend import load_templates, default_template_dir
from factdesk.cli import main as cli_main
from factdesk.corpus import LABEL_ORDER, DecisionLabel
from factdesk.evaluation import (
    BaselineScheme,
    macro_metrics,
    mine_paths,
    random_baseline,
    sweep_fact_ranges,
)
from factdesk.explanation import (
    ExplanationWarning,
    fact_statistics,
    parse_explanation,
    render_explanation,
)
from factdesk.learn import (
    FEATURE_DIM,
    INPUT_DIM,
    N_DECISIONS,
    DecisionPolicy,
    RewardModel,
    fit_reward,
    grad_check,
    input_features,
    optimize_policy,
    penalty_term,
    reward_value_and_grad,
    rl_value_and_grad,
    sft_value_and_grad,
    softmax,
    total_variation,
)
from factdesk.reflect import Demonstration, build_datasets, run_traces
from factdesk.synth import (
    build_reflection_corpus,
    make_explanation,
    make_path_corpus,
    make_planted_pairs,
    make_stats_corpus,
    make_table,
    plan_decisions,
    random_explanations,
    write_demo_corpus,
    build_decision_script,
)


def _report(number: int, description: str) -> None:
    print(f"ACCEPTANCE {number:02d} PASS - {description}")


@pytest.fixture(scope="module")
def templates():
    return load_templates(default_template_dir())


def test_criterion_01_explanation_round_trip():
    table = make_table("RT", 40, seed=1)
    corpus = random_explanations(table, 200, fact_range=(6, 10), seed=5)

    start = perf_counter()
    successes = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        for e in corpus:
            if parse_explanation(render_explanation(e), table, (6, 10)) == e:
                successes += 1
    elapsed = perf_counter() - start

    assert successes == 200
    assert {e.decision for e in corpus} == set(LABEL_ORDER)
    strengths = {
        (f.strength.sign, f.strength.magnitude) for e in corpus for f in e.selected
    }
    assert len(strengths) == 6
    assert {len(e.selected) for e in corpus} == {6, 7, 8, 9, 10}
    assert elapsed < 1.0
    _report(1, f"200/200 explanations round-trip in {elapsed:.3f}s")


def test_criterion_02_reflection_pigeonhole(templates):
    start = perf_counter()
    instances, backend = build_reflection_corpus(100, templates, seed=17, max_reflections=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        traces = run_traces(instances, backend, max_reflections=4, templates=templates)
    elapsed = perf_counter() - start

    assert len(traces) == 100
    assert all(t.solved for t in traces)
    assert all(len(t.attempts) <= 5 for t in traces)

    golds = {instance_id: gold for instance_id, _, gold in instances}
    demos, pairs = build_datasets(traces)
    assert all(d.output.decision == golds[d.instance_id] for d in demos)
    for pair in pairs:
        assert pair.preferred.decision == golds[pair.instance_id]
        assert pair.rejected.decision != golds[pair.instance_id]
    assert elapsed < 5.0
    _report(2, f"100/100 traces solved within 5 attempts in {elapsed:.2f}s; datasets consistent")


def test_criterion_03_decision_path_percentages():
    traces = make_path_corpus(
        {("B", "H"): 101, ("B", "H", "SB"): 90, ("B", "H", "SB", "S"): 47},
        total=1000,
        seed=3,
    )
    report = mine_paths(traces, top_k=3)
    got = [(path.text, pct) for path, pct in report.correct]
    assert got[0] == ("B→H", 10.1)
    assert got[1] == ("B→H→SB", 9.0)
    assert got[2] == ("B→H→SB→S", 4.7)
    _report(3, "planted path frequencies mined exactly (10.1 / 9.0 / 4.7)")


def test_criterion_04_supporting_fact_statistics():
    explanations, tables = make_stats_corpus()
    report = fact_statistics(explanations, tables)
    assert abs(report.mean_table_facts - 39.92) < 1e-9
    assert abs(report.mean_selected - 9.11) < 1e-9
    assert abs(report.mean_favorable - 8.01) < 1e-9
    assert abs(report.mean_adverse - 1.10) < 1e-9
    for got, want in zip(report.favorable_by_magnitude, (1.00, 4.53, 2.48)):
        assert abs(got - want) < 1e-9
    _report(4, "planted corpus statistics reproduced to 1e-9")


def test_criterion_05_reward_model_recovery():
    start = perf_counter()
    train, utility = make_planted_pairs(1000, seed=11)
    held, _ = make_planted_pairs(500, seed=1011, utility=utility)
    # Default 1e-4 learning rate scaled to a single full batch of 1,000
    # pairs on unit-scale (standardized) features.
    result = fit_reward(train, epochs=3, lr=1.0)
    accuracy = result.pairwise_accuracy(held)
    elapsed = perf_counter() - start

    oracle_agreement = np.mean(
        [
            (result.model.score(_embed_pref(p)) > result.model.score(_embed_rej(p)))
            == (utility @ _embed_pref(p) > utility @ _embed_rej(p))
            for p in held
        ]
    )
    assert accuracy >= 0.95
    assert oracle_agreement == accuracy  # labels came from the planted utility
    assert elapsed < 10.0
    _report(5, f"held-out pairwise accuracy {accuracy:.3f} >= 0.95 in {elapsed:.2f}s")


def _embed_pref(pair):
    from factdesk.learn import embed

    return embed(pair.input, pair.preferred)


def _embed_rej(pair):
    from factdesk.learn import embed

    return embed(pair.input, pair.rejected)


def test_criterion_06a_penalty_equals_beta_at_reference():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        p = softmax(rng.normal(size=5) * rng.uniform(0.1, 4.0))
        assert abs(penalty_term(p, p, beta=0.2) - 0.2) < 1e-12
    _report(6, "(a) penalty equals beta at p'=p for 1000 random policies (1e-12)")


def test_criterion_06b_penalty_lower_bound():
    rng = np.random.default_rng(66)
    for _ in range(10_000):
        p_new = softmax(rng.normal(size=5) * 2.0)
        p_ref = softmax(rng.normal(size=5) * 2.0)
        assert penalty_term(p_new, p_ref, beta=0.2) >= 0.2 - 1e-12
    _report(6, "(b) penalty >= beta on 10000 random policy pairs (Cauchy-Schwarz)")


def _seeded_instances(seed: int, n: int = 8) -> list[Demonstration]:
    import random as _random

    rng = _random.Random(seed)
    out = []
    for i in range(n):
        table = make_table(f"GC{seed}_{i}", 20 + (seed + i) % 25, seed=seed * 100 + i)
        out.append(
            Demonstration(f"gc{seed}:{i}", table, make_explanation(table, LABEL_ORDER[(seed + i) % 5], rng))
        )
    return out


def test_criterion_06c_gradients_match_finite_differences():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        instances = _seeded_instances(seed)
        pairs, _ = make_planted_pairs(30, seed=seed)
        reward = RewardModel(phi=rng.normal(size=FEATURE_DIM) * 0.1)
        reference = DecisionPolicy(theta=rng.normal(size=(N_DECISIONS, INPUT_DIM)) * 0.05)

        checks = [
            (sft_value_and_grad(instances), rng.normal(size=N_DECISIONS * INPUT_DIM) * 0.05),
            (reward_value_and_grad(pairs), rng.normal(size=FEATURE_DIM) * 0.05),
            (
                rl_value_and_grad(instances, reward, reference, beta=0.2),
                rng.normal(size=N_DECISIONS * INPUT_DIM) * 0.05,
            ),
        ]
        for fn, params in checks:
            worst = max(worst, grad_check(fn, params, epsilon=1e-5))
    assert worst <= 1e-4
    _report(6, f"(c) max gradient relative error {worst:.2e} <= 1e-4 on 20 seeded instances")


def test_criterion_07_policy_optimization_behavior():
    start = perf_counter()
    instances = _seeded_instances(7, n=16)
    rng = np.random.default_rng(7)

    # Zero rewards, beta = 0.2: total-variation distance to the frozen
    # reference strictly decreases epoch over epoch.
    reference = DecisionPolicy(theta=rng.normal(size=(N_DECISIONS, INPUT_DIM)) * 0.02)
    policy = DecisionPolicy(theta=reference.theta + rng.normal(size=(N_DECISIONS, INPUT_DIM)) * 0.03)
    zero_reward = RewardModel(phi=np.zeros(FEATURE_DIM))

    def mean_tv(p: DecisionPolicy) -> float:
        return float(
            np.mean(
                [
                    total_variation(p.probs(input_features(d.input)), reference.probs(input_features(d.input)))
                    for d in instances
                ]
            )
        )

    tv_curve = [mean_tv(policy)]
    for _ in range(10):
        policy = optimize_policy(
            policy, zero_reward, instances, beta=0.2, epochs=1, lr=0.1, reference=reference
        ).policy
        tv_curve.append(mean_tv(policy))
    assert all(b < a for a, b in zip(tv_curve, tv_curve[1:]))

    # Beta = 0 with a reward peaked on one decision: the trained policy's
    # argmax becomes that decision on every input.
    peaked = np.zeros(FEATURE_DIM)
    peaked[8 + LABEL_ORDER.index(DecisionLabel.SELL)] = 5.0
    trained = optimize_policy(
        DecisionPolicy.zeros(),
        RewardModel(phi=peaked),
        instances,
        beta=0.0,
        epochs=300,
        lr=0.5,
    ).policy
    assert all(
        trained.argmax(input_features(d.input)) is DecisionLabel.SELL for d in instances
    )
    elapsed = perf_counter() - start
    assert elapsed < 5.0
    _report(
        7,
        f"TV to reference fell {tv_curve[0]:.4f} -> {tv_curve[-1]:.4f} strictly; "
        f"peaked reward flips every argmax in {elapsed:.2f}s",
    )


def test_criterion_08_metric_oracle():
    B, H = DecisionLabel.BUY, DecisionLabel.HOLD
    metrics = macro_metrics([B, B, H, H], [B, H, H, H])
    assert abs(metrics.accuracy - 0.75) < 1e-9
    assert abs(metrics.f1 - (2 / 3 + 0.8) / 2) < 1e-9
    assert random_baseline([0.2] * 5, BaselineScheme.UNIFORM) == 0.2
    _report(8, "hand-worked macro metrics and uniform baseline reproduced")


def test_criterion_09_pipeline_determinism(tmp_path, templates):
    import hashlib

    start = perf_counter()
    corpus_dir = tmp_path / "corpus"
    paths = write_demo_corpus(corpus_dir, templates, n_instances=6, seed=7)
    cfg = str(paths["config"])

    def run_pipeline(out_dir) -> None:
        out = str(out_dir)
        stages = [
            ["split", "--config", cfg, "--out", out],
            ["distill", "--config", cfg, "--transcripts", f"{out}/train.jsonl", "--out", out],
            ["decide", "--config", cfg, "--tables", f"{out}/tables.jsonl", "--out", out],
            ["reflect", "--config", cfg, "--tables", f"{out}/tables.jsonl", "--labels", f"{out}/train.jsonl", "--out", out],
            ["build-datasets", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
            ["train-rm", "--config", cfg, "--comparisons", f"{out}/comparisons.jsonl", "--out", out],
            ["train-policy", "--config", cfg, "--demos", f"{out}/demonstrations.jsonl", "--rm", f"{out}/reward_model.txt", "--out", out],
            ["evaluate", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
            ["paths", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
            ["stats", "--config", cfg, "--traces", f"{out}/traces.jsonl", "--out", out],
            ["sweep", "--config", cfg, "--tables", f"{out}/tables.jsonl", "--labels", f"{out}/train.jsonl", "--out", out],
        ]
        for stage in stages:
            assert cli_main(stage) == 0

    def hash_tree(root) -> str:
        digest = hashlib.sha256()
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
        return digest.hexdigest()

    run_pipeline(tmp_path / "out1")
    run_pipeline(tmp_path / "out2")
    h1 = hash_tree(tmp_path / "out1")
    h2 = hash_tree(tmp_path / "out2")
    elapsed = perf_counter() - start
    assert h1 == h2
    assert elapsed < 30.0
    _report(9, f"two pipeline runs byte-identical (tree hash {h1[:12]}...) in {elapsed:.1f}s")


def test_criterion_10_fact_range_sweep(templates):
    import random as _random

    from factdesk.backend import ScriptedBackend
    from factdesk.evaluation import DEFAULT_SWEEP_RANGES

    script: dict[str, str] = {}
    instances = []
    for i in range(10):
        table = make_table(f"SWP{i}", 40, seed=100 + i)
        gold = LABEL_ORDER[i % 5]
        for fact_range in DEFAULT_SWEEP_RANGES:
            plan_rng = _random.Random(100 + i)
            decisions = plan_decisions(gold, i % 5, plan_rng)
            build_decision_script(table, decisions, templates, fact_range, script, seed=100 + i)
        instances.append((f"swp{i}", table, gold))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExplanationWarning)
        result = sweep_fact_ranges(
            instances, ScriptedBackend(script), max_reflections=4, templates=templates
        )
    assert result.ranges == ((3, 6), (6, 10), (10, 15))
    for fact_range in result.ranges:
        rates = result.solve_rates[fact_range]
        assert len(rates) == 5
        assert all(b >= a for a, b in zip(rates, rates[1:]))
    _report(10, "sweep ran exactly ranges 3-6, 6-10, 10-15 with monotone curves")
