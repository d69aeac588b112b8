"""Quick oracle and invariant checks, run by ``gels selftest``."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agent import (
    AgentConfig,
    ReplayBuffer,
    Transition,
    actor_forward,
    attention_coefficients,
    init_params,
    td_loss_graph,
)
from .diffnum import ParamStore, backward, finite_difference, forward
from .evaluation import macro_f1, micro_f1, roc_auc
from .graph import Neighborhood
from .qoe import ConnectionLevel, QoeLabel, Segment, SegmentTrace, connection_level, kl_divergence, label_of, qoe


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _qoe_example():
    trace = SegmentTrace((Segment(2, 2.0), Segment(3, 6.0), Segment(3, 2.0)), bandwidth=2.0, buffer_seconds=2.0)
    got = qoe(trace)
    return round(got, 4) == 2.2667, f"{got:.6f}"


def _formula_anchors():
    kl, _ = kl_divergence({0: 1.0, 1: 2.0}, {0: 2.0, 1: 1.0})
    levels = [connection_level(x) for x in (3, 7, 12)]
    bins = [label_of(x) for x in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)]
    ok = (
        abs(kl - math.log(2)) <= 1e-12
        and levels == [ConnectionLevel.LOW, ConnectionLevel.MEDIUM, ConnectionLevel.HIGH]
        and bins == [QoeLabel.BAD, QoeLabel.POOR, QoeLabel.FAIR, QoeLabel.GOOD, QoeLabel.EXCELLENT, QoeLabel.EXCELLENT]
    )
    return ok, f"kl={kl!r}"


def _attention_example():
    store = ParamStore()
    store.add("embed", (3, 1), zeros=True)
    store["embed"] = np.array([[1.0], [2.0], [0.0]])
    store.add("enc.W", (1, 1), zeros=True)
    store["enc.W"] = np.array([[1.0]])
    store.add("enc.alpha", (2,), zeros=True)
    store["enc.alpha"] = np.array([1.0, 1.0])
    store.add("actor.W1", (1, 1), zeros=True)
    store.add("actor.W2", (2, 1), zeros=True)
    # viewer 2 has the zero embedding; providers 0 and 1 carry z=1 and z=2
    coef = attention_coefficients(2, Neighborhood(2, 1, ((0, 1.0, 1.0), (1, 1.0, 2.0))), store)
    ok = abs(coef[0] - 0.0474) < 5e-5 and abs(coef[1] - 0.9526) < 5e-5
    return ok, f"{coef[0]:.4f}/{coef[1]:.4f}"


def _tiny_transitions(rng, n):
    def neigh(u):
        k = int(rng.integers(1, 3))
        ids = sorted(rng.choice([v for v in range(n) if v != u], size=k, replace=False))
        return Neighborhood(u, 1, tuple((int(v), 5.0, float(rng.uniform(0, 5))) for v in ids))

    out = []
    for _ in range(6):
        u = int(rng.integers(n))
        a = int(rng.choice([v for v in range(n) if v != u]))
        out.append(Transition(u, neigh(u), a, float(rng.uniform(0, 5)), neigh(u), 0.0))
    return out


def _gradients():
    rng = np.random.default_rng(0)
    cfg = AgentConfig(embed_dim=4, state_dim=3, hidden_dim=5)
    params = init_params(5, cfg, seed=1)
    trs = _tiny_transitions(rng, 5)
    g, loss = td_loss_graph(trs, params, cfg.gamma)
    grads = backward(g, output=loss)

    def loss_fn(store):
        return float(forward(g, store, output=loss))

    fd = finite_difference(loss_fn, params, [k for k in grads])
    worst = 0.0
    for k in grads:
        rel = np.abs(grads[k] - fd[k]) / np.maximum(np.maximum(np.abs(grads[k]), np.abs(fd[k])), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst < 1e-3, f"max rel err {worst:.2e}"


def _softmax_sums():
    cfg = AgentConfig(embed_dim=6, state_dim=4, hidden_dim=5)
    params = init_params(8, cfg, seed=2)
    dist = actor_forward(np.random.default_rng(3).normal(size=(20, 4)), params)
    err = float(np.abs(dist.sum(axis=1) - 1).max())
    return err <= 1e-9, f"{err:.1e}"


def _buffer_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        buf = ReplayBuffer(k)
        scores = rng.integers(0, 4, size=int(rng.integers(1, 30))).astype(float)
        for s in scores:
            buf.insert(Transition(0, Neighborhood(0, 1, ()), 1, 0.0, Neighborhood(0, 2, ()), float(s)))
        expected = sorted(((s, i) for i, s in enumerate(scores)), reverse=True)[:k]
        if buf.scores() != expected:
            return False, f"k={k} got {buf.scores()} expected {expected}"
    return True, "50 sequences"


def _auc_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(2, 20))
        scores = rng.integers(0, 5, size=n).astype(float)
        pos = rng.random(n) < 0.5
        P, N = scores[pos], scores[~pos]
        if P.size == 0 or N.size == 0:
            continue
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(P, N))
        if roc_auc(scores, pos) != pairs / (P.size * N.size):
            return False, f"mismatch on n={n}"
    return True, "50 cases"


def _f1_example():
    micro = micro_f1(["A", "B", "B", "B"], ["A", "A", "B", "B"])
    macro = macro_f1(["A", "B", "B", "B"], ["A", "A", "B", "B"])
    return micro == 0.75 and abs(macro - 0.7333333333) < 1e-9, f"micro={micro} macro={macro:.10f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "qoe worked example": _qoe_example,
    "formula anchors": _formula_anchors,
    "attention worked example": _attention_example,
    "td gradients vs finite differences": _gradients,
    "actor distributions sum to one": _softmax_sums,
    "replay buffer vs brute force": _buffer_oracle,
    "auc vs pairwise concordance": _auc_oracle,
    "f1 worked example": _f1_example,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
