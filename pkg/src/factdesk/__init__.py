"""Desk-scale earnings-call decision pipeline.

Transcript -> fact table -> structured explanation -> self-reflection ->
demonstration/comparison datasets -> reward-model and policy training ->
evaluation and decision-path analysis.
"""

from .backend import (
    DefaultPolicy,
    LlmBackend,
    MissingSlot,
    PromptTemplate,
    RemoteBackend,
    RemoteConfig,
    ScriptedBackend,
    ScriptMiss,
    default_template_dir,
    fingerprint,
    load_templates,
)
from .corpus import (
    DEFAULT_SECTORS,
    DEFAULT_THRESHOLDS,
    LABEL_ORDER,
    DecisionLabel,
    PriceRecord,
    Speech,
    Transcript,
    derive_label,
    label_for_return,
    split_corpus,
)
from .explanation import (
    ParseError,
    SelectedFact,
    Sign,
    StatsReport,
    Strength,
    StructuredExplanation,
    fact_statistics,
    parse_explanation,
    render_explanation,
)
from .facttable import (
    Fact,
    FactTable,
    MetricClass,
    MetricKind,
    Origin,
    classify_metric,
    distill,
    fact_budget,
    render_fact_table,
)
from .reflect import (
    ComparisonPair,
    Demonstration,
    ReflectionTrace,
    Termination,
    build_datasets,
    decide_once,
    reflect_once,
    run_trace,
)
from .learn import (
    DecisionPolicy,
    RewardModel,
    embed,
    fit_reward,
    fit_sft,
    grad_check,
    optimize_policy,
    penalty_term,
    rl_objective,
)
from .evaluation import (
    BaselineScheme,
    ConfusionMatrix,
    DecisionPath,
    MacroMetrics,
    confusion_by_round,
    macro_metrics,
    mine_paths,
    random_baseline,
    sweep_fact_ranges,
)

__version__ = "0.1.0"
