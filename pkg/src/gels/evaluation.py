"""Classification metrics, tracker policies and the two evaluation experiments."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .agent import AgentConfig, actor_forward, empty_scores, encode_states, label_scores_from_quality, predicted_quality
from .boosting import EventSplit
from .diffnum import ParamStore
from .graph import CDN, EventTrace, neighborhoods
from .qoe import ConnectionLevel, QoeConfig, QoeLabel, connection_level, label_viewer, normalize_qoe, viewer_qoe
from .sim.env import EnvConfig, EnvState, allowed_from_trace, env_reset, env_step

log = logging.getLogger(__name__)

MINUTE_BUCKET = 5


def roc_auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Rank-statistic AUC with half credit for ties; NaN when only one class is present."""
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    if scores.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        log.debug("AUC undefined for single-class input (%d positives, %d negatives)", n_pos, n_neg)
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _check_lengths(preds, truth):
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise ValueError("no samples")


def micro_f1(preds: Sequence, truth: Sequence) -> float:
    _check_lengths(preds, truth)
    # pooled over classes, each miss is one FP and one FN
    tp = sum(p == t for p, t in zip(preds, truth))
    fp = fn = len(truth) - tp
    return 2 * tp / (2 * tp + fp + fn)


def macro_f1(preds: Sequence, truth: Sequence) -> float:
    """Unweighted mean F1 over the classes that occur in ``truth``."""
    _check_lengths(preds, truth)
    scores = []
    for c in sorted(set(truth)):
        tp = sum(p == c and t == c for p, t in zip(preds, truth))
        fp = sum(p == c and t != c for p, t in zip(preds, truth))
        fn = sum(p != c and t == c for p, t in zip(preds, truth))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


# ---------------------------------------------------------------- policies

Policy = Callable[[EnvState], dict[int, int]]


def _open_slots(state: EnvState, u: int) -> list[int]:
    return [v for v in range(state.n) if v != u and v not in state.providers[u]]


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: EnvState) -> dict[int, int]:
        actions = {}
        for u in range(state.n):
            allowed = _open_slots(state, u)
            if allowed:
                actions[u] = allowed[self.rng.integers(len(allowed))]
        return actions


class BandwidthGreedyPolicy:
    """Connects every viewer to the highest-capacity peer it is not already using."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, state: EnvState) -> dict[int, int]:
        actions = {}
        for u in range(state.n):
            allowed = _open_slots(state, u)
            if allowed:
                actions[u] = min(allowed, key=lambda v: (-state.bandwidth[u, v], v))
        return actions


class ReplayPolicy:
    """Re-issues whatever new connection the recorded trace made each minute."""

    def __init__(self, trace: EventTrace):
        self.trace = trace

    def __call__(self, state: EnvState) -> dict[int, int]:
        t_next = state.minute + 1
        actions = {}
        for u in range(state.n):
            new = allowed_from_trace(self.trace, u, t_next) - set(state.providers[u])
            if new:
                actions[u] = min(new)
        return actions


class TrackerPolicy:
    """Greedy actor: each viewer gets the most probable peer it is not already using."""

    def __init__(self, params: ParamStore, self_term: bool = True):
        self.params = params
        self.self_term = self_term

    def __call__(self, state: EnvState) -> dict[int, int]:
        neighs = state.neighborhoods()
        dists = actor_forward(encode_states(neighs, self.params, self.self_term), self.params)
        actions = {}
        for u in range(state.n):
            allowed = np.array(_open_slots(state, u), dtype=int)
            allowed = allowed[allowed < dists.shape[1]]
            if allowed.size:
                actions[u] = int(allowed[np.argmax(dists[u, allowed])])
        return actions


def baseline_policy(kind: str, seed: int = 0) -> Policy:
    if kind == "random":
        return RandomPolicy(seed)
    if kind == "bandwidth_greedy":
        return BandwidthGreedyPolicy(seed)
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------- label prediction


@dataclass
class LabeledScore:
    true_label: QoeLabel
    scores: dict[QoeLabel, float]
    viewer: int
    minute: int
    level: ConnectionLevel | None = None

    @property
    def predicted(self) -> QoeLabel:
        return max(QoeLabel, key=lambda label: (self.scores[label], -label.value))


def bucket_of(minute: int) -> int:
    return int(math.ceil(minute / MINUTE_BUCKET) * MINUTE_BUCKET)


def score_split(
    params: ParamStore, split: EventSplit, agent_cfg: AgentConfig, qoe_cfg: QoeConfig = QoeConfig()
) -> list[LabeledScore]:
    """Predict every viewer's label for each held-out minute from the previous minute's graph."""
    trace = split.event
    out = []
    for t in split.test_minutes:
        prev = neighborhoods(trace, t - 1, qoe_cfg)
        now = neighborhoods(trace, t, qoe_cfg)
        allowed = [allowed_from_trace(trace, u, t) or None for u in range(trace.n)]
        live = [u for u in range(trace.n) if len(prev[u])]
        p_hat = {}
        if live:
            p = predicted_quality([prev[u] for u in live], [allowed[u] for u in live], params, agent_cfg, qoe_cfg)
            p_hat = dict(zip(live, p))
        for u in range(trace.n):
            scores = label_scores_from_quality(p_hat[u]) if u in p_hat else empty_scores()
            best = max((e.throughput for e in trace.provider_edges(u, t)), default=None)
            out.append(
                LabeledScore(
                    true_label=label_viewer(now[u].qoes, qoe_cfg),
                    scores=scores,
                    viewer=u,
                    minute=t,
                    level=None if best is None else connection_level(best),
                )
            )
    return out


@dataclass
class EvalReport:
    label_auc: dict[tuple[str, int], float] = field(default_factory=dict)
    minute_metrics: dict[tuple[str, int], float] = field(default_factory=dict)
    level_auc: dict[str, float] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)
    label_counts: dict[tuple[int, str], int] = field(default_factory=dict)
    buckets: dict[int, list[int]] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        rows = []
        for (label, b), v in sorted(self.label_auc.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rows.append(("auc", label, str(b), v))
        for (metric, b), v in sorted(self.minute_metrics.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rows.append((metric, "all", str(b), v))
        for level, v in self.level_auc.items():
            rows.append(("auc", level, "all", v))
        for metric, v in self.overall.items():
            rows.append((metric, "all", "all", v))
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "label_or_level", "minute_bucket", "value"])
            for metric, key, bucket, value in self.rows():
                w.writerow([metric, key, bucket, repr(float(value))])


def _label_aucs(samples: Sequence[LabeledScore]) -> dict[QoeLabel, float]:
    return {
        label: roc_auc([s.scores[label] for s in samples], [s.true_label == label for s in samples])
        for label in QoeLabel
    }


def _nanmean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def summarize(samples: Sequence[LabeledScore]) -> EvalReport:
    report = EvalReport()
    by_bucket: dict[int, list[LabeledScore]] = {}
    for s in samples:
        by_bucket.setdefault(bucket_of(s.minute), []).append(s)
        report.label_counts[(s.minute, s.true_label.name)] = report.label_counts.get((s.minute, s.true_label.name), 0) + 1
    for b, group in sorted(by_bucket.items()):
        report.buckets[b] = sorted({s.minute for s in group})
        aucs = _label_aucs(group)
        for label, v in aucs.items():
            report.label_auc[(label.name, b)] = v
        preds = [s.predicted for s in group]
        truth = [s.true_label for s in group]
        report.minute_metrics[("macro_auc", b)] = _nanmean(aucs.values())
        report.minute_metrics[("micro_f1", b)] = micro_f1(preds, truth)
        report.minute_metrics[("macro_f1", b)] = macro_f1(preds, truth)
    for level in ConnectionLevel:
        group = [s for s in samples if s.level == level]
        if group:
            report.level_auc[level.name] = _nanmean(_label_aucs(group).values())
    if samples:
        aucs = _label_aucs(samples)
        for label, v in aucs.items():
            report.overall[f"auc_{label.name}"] = v
        report.overall["macro_auc"] = _nanmean(aucs.values())
        preds = [s.predicted for s in samples]
        truth = [s.true_label for s in samples]
        report.overall["micro_f1"] = micro_f1(preds, truth)
        report.overall["macro_f1"] = macro_f1(preds, truth)
    return report


def one_vs_rest_eval(
    params: ParamStore, split: EventSplit, agent_cfg: AgentConfig = AgentConfig(), qoe_cfg: QoeConfig = QoeConfig()
) -> EvalReport:
    return summarize(score_split(params, split, agent_cfg, qoe_cfg))


# ---------------------------------------------------------------- improvement experiment


def rollout_labels(
    policy: Policy, event: EventTrace, minutes: int, seed: int = 0, env_cfg: EnvConfig = EnvConfig()
) -> tuple[list[list[QoeLabel]], list[list[float]]]:
    """Labels and normalized QoE of every viewer for minutes 1..``minutes`` under ``policy``."""
    state, _ = env_reset(event, seed, env_cfg)
    labels, quality = [], []
    while True:
        qoes = state.viewer_qoes()
        labels.append([label_viewer(q, env_cfg.qoe) for q in qoes])
        quality.append([normalize_qoe(viewer_qoe(q), env_cfg.qoe) if q else 0.0 for q in qoes])
        if state.minute >= min(minutes, event.T):
            break
        env_step(state, policy(state))
    return labels, quality


def recorded_labels(event: EventTrace, minutes: int, qoe_cfg: QoeConfig = QoeConfig()) -> list[list[QoeLabel]]:
    return [[label_viewer(nb.qoes, qoe_cfg) for nb in neighborhoods(event, t, qoe_cfg)] for t in range(1, minutes + 1)]


@dataclass
class ImprovementResult:
    counts: dict[tuple[int, QoeLabel], int]
    initial: dict[tuple[int, QoeLabel], int]
    mean_quality: dict[int, float]

    def relative_change(self, minute: int, label: QoeLabel) -> float:
        base = self.initial.get((minute, label), 0)
        return (self.counts.get((minute, label), 0) - base) / max(base, 1)

    def rows(self) -> list[tuple[int, str, int, float]]:
        minutes = sorted({m for m, _ in self.counts} | {m for m, _ in self.initial})
        return [
            (m, label.name, self.counts.get((m, label), 0), self.relative_change(m, label))
            for m in minutes
            for label in QoeLabel
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["minute", "label", "count", "relative_change"])
            for m, label, count, rel in self.rows():
                w.writerow([m, label, count, repr(float(rel))])


def improvement_experiment(
    policy_factory: Callable[[EventTrace], Policy],
    events: Sequence[EventTrace],
    minutes: int,
    seed: int = 0,
    env_cfg: EnvConfig = EnvConfig(),
) -> ImprovementResult:
    """Roll a policy live on each event and compare label counts with the recorded trace."""
    counts: Counter = Counter()
    initial: Counter = Counter()
    quality: dict[int, list[float]] = {}
    for i, event in enumerate(events):
        horizon = min(minutes, event.T)
        labels, q = rollout_labels(policy_factory(event), event, horizon, seed + i, env_cfg)
        for m, (row, qrow) in enumerate(zip(labels, q), start=1):
            counts.update((m, lab) for lab in row)
            quality.setdefault(m, []).extend(qrow)
        for m, row in enumerate(recorded_labels(event, horizon, env_cfg.qoe), start=1):
            initial.update((m, lab) for lab in row)
    return ImprovementResult(dict(counts), dict(initial), {m: float(np.mean(v)) for m, v in quality.items()})
