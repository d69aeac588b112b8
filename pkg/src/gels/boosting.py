"""Cross-event training.

Each event is split by minute. A copy of the global parameters is fine-tuned on the early
minutes of the event, then the adapted model's loss on the later minutes is differentiated and
the step is applied to the global parameters (a first-order meta update). Processing every
event this way, epoch after epoch, minimizes the summed held-out loss over all events.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agent import (
    AgentConfig,
    ReplayBuffer,
    Transition,
    actor_forward,
    agent_gradients,
    encode_states,
    init_params,
    n_actions_of,
    select_action,
    td_update,
    transition_kl,
)
from .diffnum import ParamStore, sgd_step
from .graph import CDN, EventTrace, neighborhood
from .sim.env import EnvConfig, allowed_from_trace, env_reset, env_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EventSplit:
    event: EventTrace
    cut: int

    def __post_init__(self):
        if not 1 <= self.cut < self.event.T:
            raise ValueError(f"cut {self.cut} must satisfy 1 <= cut < T={self.event.T}")

    @property
    def train_minutes(self) -> range:
        return range(1, self.cut + 1)

    @property
    def test_minutes(self) -> range:
        return range(self.cut + 1, self.event.T + 1)


@dataclass(frozen=True)
class TrainConfig:
    agent: AgentConfig = AgentConfig()
    env: EnvConfig = EnvConfig()
    eta: float = 1e-3
    epochs: int = 1
    adapt_epochs: int = 1
    cut: int = 30
    seed: int = 0
    # start the critic's output bias at the discounted value of the mean recorded QoE
    value_init: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("boosting learning rate must be positive")
        if self.epochs < 0 or self.adapt_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclass
class TrainResult:
    params: ParamStore
    log: list[dict] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.log:
            if row["test_loss"] is not None:
                by_epoch.setdefault(row["epoch"], []).append(row["test_loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def split_event(event: EventTrace, cut: int) -> EventSplit:
    return EventSplit(event, cut)


def event_fingerprint(event: EventTrace) -> str:
    h = hashlib.sha256()
    h.update(f"{event.n}:{event.T}:{event.cdn_capacity}:{event.max_degree}".encode())
    h.update(np.ascontiguousarray(event.bandwidth).tobytes())
    for minute_edges in event.edges:
        for e in minute_edges:
            h.update(f"{e.minute},{e.src},{e.dst},{e.throughput!r};".encode())
    return h.hexdigest()


def _seed_for(*parts) -> int:
    ints = [int(p[:16], 16) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0])


def run_masked_episode(
    params: ParamStore,
    split: EventSplit,
    cfg: TrainConfig,
    buf: ReplayBuffer,
    seed: int,
) -> list[float]:
    """Replay the training minutes of an event, choosing only among recorded connections."""
    trace = split.event
    rng = np.random.default_rng(seed)
    state, neighs = env_reset(trace, seed, cfg.env)
    losses = []
    for t in range(1, split.cut):
        states = encode_states(neighs, params, cfg.agent.self_term)
        dists = actor_forward(states, params)
        actions = {}
        for u in range(trace.n):
            allowed = allowed_from_trace(trace, u, t + 1)
            allowed.discard(u)
            if allowed:
                actions[u] = select_action(dists[u], allowed, cfg.agent.epsilon, rng, viewer=u)
        result = env_step(state, actions, trace)
        for u, a in actions.items():
            nxt = result.neighborhoods[u]
            buf.insert(
                Transition(u, neighs[u], a, result.rewards[u], nxt, transition_kl(neighs[u], nxt), state=states[u])
            )
        loss = td_update(buf, params, cfg.agent)
        if loss is not None:
            losses.append(loss)
        neighs = result.neighborhoods
    return losses


def adapt_on_event(
    global_params: ParamStore,
    split: EventSplit,
    cfg: TrainConfig,
    seed: int | None = None,
    losses: list | None = None,
) -> ParamStore:
    """Fine-tuned copy of ``global_params``; the input is left untouched."""
    params = global_params.copy()
    base = cfg.seed if seed is None else seed
    buf = ReplayBuffer(cfg.agent.buffer_k)
    fp = event_fingerprint(split.event)
    for epoch in range(cfg.adapt_epochs):
        ep_losses = run_masked_episode(params, split, cfg, buf, _seed_for(base, epoch, fp))
        if losses is not None:
            losses.extend(ep_losses)
    return params


def held_out_transitions(split: EventSplit, cfg: TrainConfig, n_actions: int) -> list[Transition]:
    """Recorded connections of the held-out minutes, replayed as forced actions."""
    trace, qcfg = split.event, cfg.env.qoe
    out = []
    for t in range(split.cut, trace.T):
        for u in range(trace.n):
            now = neighborhood(trace, u, t, qcfg)
            nxt = neighborhood(trace, u, t + 1, qcfg)
            rewards = nxt.qoe_map()
            for v in nxt.ids:
                if v == CDN or v >= n_actions:
                    continue
                out.append(Transition(u, now, v, rewards[v], nxt, transition_kl(now, nxt)))
    return out


def boost_update(
    global_params: ParamStore,
    adapted: ParamStore,
    split: EventSplit,
    cfg: TrainConfig,
    eta: float | None = None,
    transitions: list[Transition] | None = None,
) -> tuple[ParamStore, float | None]:
    """Apply the adapted model's held-out gradients to a copy of the global parameters."""
    eta = cfg.eta if eta is None else eta
    if transitions is None:
        transitions = held_out_transitions(split, cfg, n_actions_of(adapted))
    if not transitions:
        return global_params.copy(), None
    loss, grads = agent_gradients(transitions, adapted, cfg.agent)
    return sgd_step(global_params.copy(), grads, eta), loss


def mean_train_reward(events: Sequence[EventTrace], cut: int, cfg: TrainConfig) -> float:
    values = [
        event.edge_qoe(t, e.src, e.dst, cfg.env.qoe)
        for event in events
        for t in range(1, min(cut, event.T) + 1)
        for e in event.edges[t - 1]
    ]
    return float(np.mean(values)) if values else 0.0


def fresh_params(events: Sequence[EventTrace], n_actions: int, cfg: TrainConfig) -> ParamStore:
    params = init_params(n_actions, cfg.agent, cfg.seed)
    if cfg.value_init:
        params["critic.b2"] = np.array([mean_train_reward(events, cfg.cut, cfg) / (1 - cfg.agent.gamma)])
    return params


def ordered_events(events: Sequence[EventTrace]) -> list[tuple[str, EventTrace]]:
    """Events keyed by content fingerprint, so caller ordering never matters."""
    keyed = sorted(((event_fingerprint(e), e) for e in events), key=lambda p: p[0])
    return keyed


def train_global(
    events: Sequence[EventTrace],
    cfg: TrainConfig,
    params: ParamStore | None = None,
    on_epoch: Callable[[int, ParamStore], None] | None = None,
) -> TrainResult:
    if not events:
        raise ValueError("need at least one event")
    n_actions = max(e.n for e in events)
    if params is None:
        params = fresh_params(events, n_actions, cfg)
    keyed = ordered_events(events)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params)
    held_out: dict[str, list[Transition]] = {}
    for epoch in range(cfg.epochs):
        for i in rng.permutation(len(keyed)):
            fp, event = keyed[i]
            split = split_event(event, cfg.cut)
            adapt_losses: list[float] = []
            adapted = adapt_on_event(result.params, split, cfg, seed=_seed_for(cfg.seed, epoch), losses=adapt_losses)
            if fp not in held_out:
                held_out[fp] = held_out_transitions(split, cfg, n_actions)
            result.params, test_loss = boost_update(result.params, adapted, split, cfg, transitions=held_out[fp])
            row = {
                "epoch": epoch,
                "event_id": fp[:12],
                "adapt_loss": float(np.mean(adapt_losses)) if adapt_losses else None,
                "test_loss": test_loss,
            }
            result.log.append(row)
            log.debug("epoch %d event %s adapt %s test %s", epoch, row["event_id"], row["adapt_loss"], test_loss)
        if result.epoch_losses():
            log.info("epoch %d mean held-out loss %.4f", epoch, result.epoch_losses()[-1])
        if on_epoch is not None:
            on_epoch(epoch, result.params)
    return result


def train_gels_star(event: EventTrace, cfg: TrainConfig, n_actions: int | None = None) -> ParamStore:
    """Single-event ablation: adapt fresh parameters on one event, no cross-event updates."""
    fresh = fresh_params([event], n_actions or event.n, cfg)
    return adapt_on_event(fresh, split_event(event, cfg.cut), cfg)
