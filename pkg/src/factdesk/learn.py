"""Desk-scale training stack over hand-crafted features.

Three objectives on fixed-length feature vectors: a categorical decision
policy fit by negative log-likelihood, a linear pairwise-preference reward
model (-log sigmoid of the score margin), and ratio-penalized policy
optimization computed in exact expectation over the five decisions. The
feature embedding stands in for an LLM hidden state; it is documented below
and pluggable, and every loss-level property survives the substitution.

All trainers are deterministic full-batch gradient descent/ascent with a
cosine learning-rate schedule and warm-up; analytic gradients are verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import LABEL_ORDER, DecisionLabel
from .explanation import Sign, StructuredExplanation
from .facttable import FactTable, MetricClass, MetricKind
from .reflect import Demonstration, ComparisonPair

# Feature layout. The first 13 coordinates describe the explanation (output
# side); the last 11 describe the input only and are the policy's feature
# space. One-hot blocks sum to 1 (decision) and to 3 (one class per metric).
FEATURE_NAMES: tuple[str, ...] = (
    "fav_s1", "fav_s2", "fav_s3",
    "adv_s1", "adv_s2", "adv_s3",
    "selected_total",
    "net_strength",
    "dec_SB", "dec_B", "dec_H", "dec_S", "dec_SS",
    "eps_bullish", "eps_stable", "eps_bearish",
    "revenue_bullish", "revenue_stable", "revenue_bearish",
    "price_bullish", "price_stable", "price_bearish",
    "table_facts",
    "bias",
)

FEATURE_DIM = len(FEATURE_NAMES)  # 24
INPUT_FEATURE_SLICE = slice(13, FEATURE_DIM)
INPUT_FEATURE_NAMES: tuple[str, ...] = FEATURE_NAMES[INPUT_FEATURE_SLICE]
INPUT_DIM = len(INPUT_FEATURE_NAMES)  # 11

N_DECISIONS = len(LABEL_ORDER)

_METRIC_ORDER = (MetricKind.EPS, MetricKind.REVENUE_TREND, MetricKind.HISTORICAL_PRICE)
_CLASS_ORDER = (MetricClass.BULLISH, MetricClass.STABLE, MetricClass.BEARISH)

DEFAULT_BETA = 0.2
DEFAULT_WARMUP_RATIO = 0.1
DEFAULT_SFT_EPOCHS = 3
DEFAULT_SFT_LR = 1e-5
DEFAULT_RM_EPOCHS = 3
DEFAULT_RM_LR = 1e-4
DEFAULT_RL_EPOCHS = 2
DEFAULT_RL_LR = 1e-5


class ReferenceZero(Exception):
    """The reference policy assigns zero probability to some decision."""


class DegenerateDataWarning(UserWarning):
    """Training data covers a single decision class."""


def _metric_one_hots(table: FactTable) -> list[float]:
    values: list[float] = []
    for kind in _METRIC_ORDER:
        cls = table.metric_classes.get(kind)
        if cls is None:
            raise ValueError(f"fact table {table.ticker!r} lacks a class for {kind.value}")
        values.extend(1.0 if cls is c else 0.0 for c in _CLASS_ORDER)
    return values


def embed(table: FactTable, explanation: StructuredExplanation) -> np.ndarray:
    """Deterministic 24-dim feature vector for an (input, output) pair.

    Layout per ``FEATURE_NAMES``: favorable and adverse counts by strength
    magnitude, total selections, net signed strength, decision one-hot
    (SB,B,H,S,SS), three metric-class one-hots, table fact count, bias.
    """
    fav = [0.0, 0.0, 0.0]
    adv = [0.0, 0.0, 0.0]
    net = 0.0
    for f in explanation.selected:
        bucket = fav if f.strength.sign is Sign.POSITIVE else adv
        bucket[f.strength.magnitude - 1] += 1.0
        net += f.strength.signed_value
    decision_hot = [0.0] * N_DECISIONS
    decision_hot[LABEL_ORDER.index(explanation.decision)] = 1.0

    values = (
        fav
        + adv
        + [float(len(explanation.selected)), net]
        + decision_hot
        + _metric_one_hots(table)
        + [float(len(table.facts)), 1.0]
    )
    return np.asarray(values, dtype=float)


def input_features(table: FactTable) -> np.ndarray:
    """Input-only features (the policy's feature space): metric one-hots,
    table fact count, bias."""
    return np.asarray(_metric_one_hots(table) + [float(len(table.facts)), 1.0])


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Linear scorer over the 24-dim embedding."""

    phi: np.ndarray

    def score(self, features: np.ndarray) -> float:
        return float(self.phi @ features)


@dataclass(frozen=True, eq=False)
class DecisionPolicy:
    """Softmax-over-five-decisions policy, linear in the input features."""

    theta: np.ndarray  # (5, INPUT_DIM)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.theta @ features

    def probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def argmax(self, features: np.ndarray) -> DecisionLabel:
        return LABEL_ORDER[int(np.argmax(self.logits(features)))]

    @classmethod
    def zeros(cls) -> "DecisionPolicy":
        return cls(theta=np.zeros((N_DECISIONS, INPUT_DIM)))


def cosine_lr(step: int, total_steps: int, lr: float, warmup_ratio: float = DEFAULT_WARMUP_RATIO) -> float:
    """Warm-up then cosine-decayed learning rate for 0-based ``step``."""
    if total_steps <= 0:
        return lr
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# Counts, net strengths, and one-hots live on very different scales, so the
# trainers normalize feature columns by their standard deviation before
# descending and fold the scales back into the returned parameters. The
# returned models always act on raw features; standardization only
# preconditions the optimization.

def _column_scale(matrix: np.ndarray, standardize: bool) -> np.ndarray:
    if not standardize or len(matrix) == 0:
        return np.ones(matrix.shape[1])
    scale = matrix.std(axis=0)
    scale[scale == 0.0] = 1.0
    return scale


# --- supervised policy fit ---------------------------------------------------

def sft_value_and_grad(
    demos: Sequence[Demonstration],
    feature_scale: np.ndarray | None = None,
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean NLL of gold decisions and its gradient, as a function of the
    flattened policy matrix. With ``feature_scale``, the parametrization acts
    on scaled features (same losses, better-conditioned gradients)."""
    if demos:
        features = np.stack([input_features(d.input) for d in demos])
        gold = np.array([LABEL_ORDER.index(d.output.decision) for d in demos])
        if feature_scale is not None:
            features = features / feature_scale
    else:
        features = np.zeros((0, INPUT_DIM))
        gold = np.zeros(0, dtype=int)

    def value_and_grad(theta_flat: np.ndarray) -> tuple[float, np.ndarray]:
        n = len(gold)
        if n == 0:
            return 0.0, np.zeros(N_DECISIONS * INPUT_DIM)
        theta = theta_flat.reshape(N_DECISIONS, INPUT_DIM)
        probs = softmax(features @ theta.T)
        nll = -float(np.mean(np.log(probs[np.arange(n), gold])))
        delta = probs.copy()
        delta[np.arange(n), gold] -= 1.0
        grad = (delta.T @ features) / n
        return nll, grad.ravel()

    return value_and_grad


@dataclass(frozen=True)
class SftResult:
    policy: DecisionPolicy
    nll_history: tuple[float, ...]  # before training, then after each epoch


def fit_sft(
    demos: Sequence[Demonstration],
    epochs: int = DEFAULT_SFT_EPOCHS,
    lr: float = DEFAULT_SFT_LR,
    seed: int = 0,
    warmup_ratio: float = DEFAULT_WARMUP_RATIO,
    standardize: bool = True,
) -> SftResult:
    """Fit the decision policy by full-batch gradient descent on mean NLL.

    One gradient step per epoch. ``seed`` is recorded for provenance; the fit
    itself is deterministic from a zero initialization.
    """
    if not demos:
        raise ValueError("demos must be nonempty")
    decisions = {d.output.decision for d in demos}
    if len(decisions) == 1:
        warnings.warn(
            f"all demonstrations share decision {next(iter(decisions)).value}",
            DegenerateDataWarning,
        )

    scale = _column_scale(np.stack([input_features(d.input) for d in demos]), standardize)
    value_and_grad = sft_value_and_grad(demos, feature_scale=scale)
    theta = np.zeros(N_DECISIONS * INPUT_DIM)
    history = [value_and_grad(theta)[0]]
    for step in range(epochs):
        _, grad = value_and_grad(theta)
        theta = theta - cosine_lr(step, epochs, lr, warmup_ratio) * grad
        history.append(value_and_grad(theta)[0])
    return SftResult(
        policy=DecisionPolicy(theta=theta.reshape(N_DECISIONS, INPUT_DIM) / scale),
        nll_history=tuple(history),
    )


# --- reward model -------------------------------------------------------------

def pair_margin_features(pair: ComparisonPair) -> np.ndarray:
    """Embedding difference preferred-minus-rejected; the preference
    probability depends only on this difference."""
    return embed(pair.input, pair.preferred) - embed(pair.input, pair.rejected)


def reward_value_and_grad(
    pairs: Sequence[ComparisonPair],
    feature_scale: np.ndarray | None = None,
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean -log sigmoid(score margin) and its gradient in phi."""
    deltas = (
        np.stack([pair_margin_features(p) for p in pairs])
        if pairs
        else np.zeros((0, FEATURE_DIM))
    )
    if feature_scale is not None:
        deltas = deltas / feature_scale

    def value_and_grad(phi: np.ndarray) -> tuple[float, np.ndarray]:
        if len(deltas) == 0:
            return 0.0, np.zeros(FEATURE_DIM)
        margins = deltas @ phi
        loss = float(np.mean(np.logaddexp(0.0, -margins)))
        grad = -(deltas.T @ _sigmoid(-margins)) / len(deltas)
        return loss, grad

    return value_and_grad


@dataclass(frozen=True)
class RewardFitResult:
    model: RewardModel
    loss_history: tuple[float, ...]

    def pairwise_accuracy(self, pairs: Sequence[ComparisonPair]) -> float:
        """Fraction of pairs whose preferred side scores strictly higher."""
        margins = np.array([pair_margin_features(p) @ self.model.phi for p in pairs])
        return float(np.mean(margins > 0.0))


def fit_reward(
    pairs: Sequence[ComparisonPair],
    epochs: int = DEFAULT_RM_EPOCHS,
    lr: float = DEFAULT_RM_LR,
    seed: int = 0,
    warmup_ratio: float = DEFAULT_WARMUP_RATIO,
    standardize: bool = True,
) -> RewardFitResult:
    """Fit the linear reward model on preference pairs (full-batch descent)."""
    if not pairs:
        raise ValueError("pairs must be nonempty")
    scale = _column_scale(np.stack([pair_margin_features(p) for p in pairs]), standardize)
    value_and_grad = reward_value_and_grad(pairs, feature_scale=scale)
    phi = np.zeros(FEATURE_DIM)
    history = [value_and_grad(phi)[0]]
    for step in range(epochs):
        _, grad = value_and_grad(phi)
        phi = phi - cosine_lr(step, epochs, lr, warmup_ratio) * grad
        history.append(value_and_grad(phi)[0])
    return RewardFitResult(model=RewardModel(phi=phi / scale), loss_history=tuple(history))


# --- ratio-penalized policy optimization --------------------------------------

def penalty_term(p_new: np.ndarray, p_ref: np.ndarray, beta: float = 1.0, kind: str = "ratio") -> float:
    """Divergence penalty keeping the optimized policy near the reference.

    ``ratio`` is the expected probability ratio beta * sum(p'^2 / p): it
    equals beta exactly when p' = p and exceeds beta otherwise
    (Cauchy-Schwarz). ``log`` is the conventional KL form
    beta * sum(p' log(p'/p)).
    """
    p_new = np.asarray(p_new, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if np.any(p_ref <= 0.0):
        raise ReferenceZero("reference policy assigns zero probability to a decision")
    if kind == "ratio":
        return float(beta * np.sum(p_new * p_new / p_ref))
    if kind == "log":
        safe = np.where(p_new > 0.0, p_new, 1.0)
        return float(beta * np.sum(p_new * np.log(safe / p_ref)))
    raise ValueError(f"unknown penalty kind {kind!r}")


def decision_rewards(
    reward: RewardModel, instance: Demonstration
) -> np.ndarray:
    """Reward of each candidate decision, holding the instance's explanation
    features fixed and swapping only the decision."""
    return np.array(
        [
            reward.score(embed(instance.input, replace(instance.output, decision=d)))
            for d in LABEL_ORDER
        ]
    )


def rl_objective(
    policy_new: DecisionPolicy,
    policy_ref: DecisionPolicy,
    reward: RewardModel,
    instance: Demonstration,
    beta: float = DEFAULT_BETA,
    penalty: str = "ratio",
) -> float:
    """Exact-expectation objective for one instance.

    sum_d p'(d|x) r(x, d) minus the divergence penalty. No sampling: the
    action space has exactly five outcomes.
    """
    fx = input_features(instance.input)
    p_new = policy_new.probs(fx)
    p_ref = policy_ref.probs(fx)
    rewards = decision_rewards(reward, instance)
    return float(p_new @ rewards) - penalty_term(p_new, p_ref, beta, penalty)


def rl_value_and_grad(
    instances: Sequence[Demonstration],
    reward: RewardModel,
    reference: DecisionPolicy,
    beta: float = DEFAULT_BETA,
    penalty: str = "ratio",
    feature_scale: np.ndarray | None = None,
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean objective over instances and its gradient in the flattened policy."""
    if instances:
        features = np.stack([input_features(d.input) for d in instances])
        rewards = np.stack([decision_rewards(reward, d) for d in instances])
        ref_probs = softmax(features @ reference.theta.T)
        if np.any(ref_probs <= 0.0):
            raise ReferenceZero("reference policy assigns zero probability to a decision")
        if feature_scale is not None:
            features = features / feature_scale
    else:
        features = np.zeros((0, INPUT_DIM))
        rewards = np.zeros((0, N_DECISIONS))
        ref_probs = np.zeros((0, N_DECISIONS))

    def value_and_grad(theta_flat: np.ndarray) -> tuple[float, np.ndarray]:
        n = len(features)
        if n == 0:
            return 0.0, np.zeros(N_DECISIONS * INPUT_DIM)
        theta = theta_flat.reshape(N_DECISIONS, INPUT_DIM)
        probs = softmax(features @ theta.T)
        if penalty == "ratio":
            pen = np.sum(probs * probs / ref_probs, axis=1)
            dpen = 2.0 * probs / ref_probs
        elif penalty == "log":
            # Clip keeps 0-probability decisions (saturated softmax) finite.
            log_ratio = np.log(np.clip(probs, 1e-300, None) / ref_probs)
            pen = np.sum(probs * log_ratio, axis=1)
            dpen = log_ratio + 1.0
        else:
            raise ValueError(f"unknown penalty kind {penalty!r}")
        objective = float(np.mean(np.sum(probs * rewards, axis=1) - beta * pen))
        # d objective / d probs, then chain through softmax rows.
        g = rewards - beta * dpen
        inner = np.sum(probs * g, axis=1, keepdims=True)
        dlogits = probs * (g - inner) / n
        grad = dlogits.T @ features
        return objective, grad.ravel()

    return value_and_grad


@dataclass(frozen=True)
class PolicyOptResult:
    policy: DecisionPolicy
    objective_history: tuple[float, ...]  # before training, then after each epoch


def optimize_policy(
    policy_init: DecisionPolicy,
    reward: RewardModel,
    instances: Sequence[Demonstration],
    beta: float = DEFAULT_BETA,
    epochs: int = DEFAULT_RL_EPOCHS,
    lr: float = DEFAULT_RL_LR,
    seed: int = 0,
    warmup_ratio: float = DEFAULT_WARMUP_RATIO,
    reference: DecisionPolicy | None = None,
    penalty: str = "ratio",
    standardize: bool = True,
) -> PolicyOptResult:
    """Gradient ascent on the mean exact-expectation objective.

    The reference policy is frozen for the whole run; by default it is the
    starting policy itself (the usual setup), but a separate frozen reference
    can be supplied.
    """
    if not instances:
        raise ValueError("instances must be nonempty")
    ref = reference if reference is not None else DecisionPolicy(theta=policy_init.theta.copy())
    scale = _column_scale(
        np.stack([input_features(d.input) for d in instances]), standardize
    )
    value_and_grad = rl_value_and_grad(
        instances, reward, ref, beta, penalty, feature_scale=scale
    )
    theta = (policy_init.theta * scale).ravel()
    history = [value_and_grad(theta)[0]]
    for step in range(epochs):
        _, grad = value_and_grad(theta)
        theta = theta + cosine_lr(step, epochs, lr, warmup_ratio) * grad
        history.append(value_and_grad(theta)[0])
    return PolicyOptResult(
        policy=DecisionPolicy(theta=theta.reshape(N_DECISIONS, INPUT_DIM) / scale),
        objective_history=tuple(history),
    )


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


# --- gradient verification -----------------------------------------------------

def grad_check(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, coordinate-wise. Zero-vs-zero coordinates count as exact."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = np.asarray(params, dtype=float)
    analytic = value_and_grad(params)[1]
    worst = 0.0
    for i in range(params.size):
        bump = np.zeros_like(params)
        bump[i] = epsilon
        numeric = (value_and_grad(params + bump)[0] - value_and_grad(params - bump)[0]) / (
            2.0 * epsilon
        )
        scale = max(1e-8, abs(analytic[i]), abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / scale)
    return worst


# --- model files ----------------------------------------------------------------

def _write_header(fh, kind: str, names: Sequence[str], meta: Mapping[str, object]) -> None:
    fh.write(f"# factdesk {kind}\n")
    fh.write(f"# dim: {len(names)}\n")
    fh.write(f"# layout: {' '.join(names)}\n")
    for key in sorted(meta):
        fh.write(f"# {key}: {meta[key]}\n")


def save_reward_model(path: str | Path, model: RewardModel, meta: Mapping[str, object] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        _write_header(fh, "reward model", FEATURE_NAMES, meta or {})
        for value in model.phi:
            fh.write(f"{float(value)!r}\n")


def load_reward_model(path: str | Path) -> RewardModel:
    values = _read_values(path, expected=FEATURE_DIM)
    return RewardModel(phi=np.array(values))


def save_policy(path: str | Path, policy: DecisionPolicy, meta: Mapping[str, object] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        _write_header(fh, "decision policy", INPUT_FEATURE_NAMES, meta or {})
        fh.write(f"# rows: {' '.join(label.value for label in LABEL_ORDER)}\n")
        for row in policy.theta:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_policy(path: str | Path) -> DecisionPolicy:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split()])
    theta = np.array(rows)
    if theta.shape != (N_DECISIONS, INPUT_DIM):
        raise ValueError(f"expected {(N_DECISIONS, INPUT_DIM)} policy matrix, got {theta.shape}")
    return DecisionPolicy(theta=theta)


def _read_values(path: str | Path, expected: int) -> list[float]:
    values = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                values.append(float(line))
    if len(values) != expected:
        raise ValueError(f"expected {expected} values in {path}, got {len(values)}")
    return values
