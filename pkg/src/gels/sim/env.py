"""Minute-stepped streaming environment.

Each minute every viewer downloads K segments from each of its providers. The player picks
the highest ladder rung the link can sustain, rebuffers are counted against a buffer that is
refilled at the start of every minute, and the reward of a tracker action is the QoE of the
connection it established.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..graph import CDN, ConnectionEdge, EventTrace, Neighborhood, build_neighborhood
from ..qoe import QoeConfig, Segment, SegmentTrace, qoe


class InvalidActionError(ValueError):
    pass


class MaskedActionError(InvalidActionError):
    pass


@dataclass(frozen=True)
class LadderConfig:
    qualities: tuple[tuple[int, float], ...] = ((1, 0.5), (2, 1.2), (3, 2.5), (4, 5.0), (5, 8.0))
    segment_seconds: float = 4.0
    segments_per_minute: int = 15

    def __post_init__(self):
        rates = [b for _, b in self.qualities]
        if any(b2 <= b1 for b1, b2 in zip(rates, rates[1:])):
            raise ValueError("ladder bitrates must be strictly increasing")
        if self.segments_per_minute < 2:
            raise ValueError("need at least two segments per minute")
        if self.segments_per_minute * self.segment_seconds > 60:
            raise ValueError("segments exceed one minute of video")

    @property
    def q_max(self) -> int:
        return self.qualities[-1][0]

    def pick(self, throughput: float) -> tuple[int, float]:
        """Highest rung whose bitrate fits in ``throughput``; the lowest rung otherwise."""
        best = self.qualities[0]
        for level, rate in self.qualities:
            if rate <= throughput:
                best = (level, rate)
        return best


@dataclass(frozen=True)
class EnvConfig:
    ladder: LadderConfig = LadderConfig()
    qoe: QoeConfig = QoeConfig()
    buffer_seconds: float = 8.0
    # per edge-minute throughput is capacity * U(jitter, 1)
    jitter: float = 0.85


def simulate_segments(throughput: float, cfg: EnvConfig) -> SegmentTrace:
    level, rate = cfg.ladder.pick(throughput)
    seg = Segment(level, rate * cfg.ladder.segment_seconds)
    return SegmentTrace((seg,) * cfg.ladder.segments_per_minute, throughput, cfg.buffer_seconds)


@dataclass
class EnvState:
    n: int
    T: int
    office_of: tuple[int, ...]
    bandwidth: np.ndarray
    cdn_capacity: float
    max_degree: int
    cfg: EnvConfig
    rng: np.random.Generator
    minute: int = 1
    providers: dict[int, dict[int, ConnectionEdge]] = field(default_factory=dict)
    edges: list[tuple[ConnectionEdge, ...]] = field(default_factory=list)
    segment_traces: dict[tuple[int, int, int], SegmentTrace] = field(default_factory=dict)
    edge_qoe: dict[tuple[int, int, int], float] = field(default_factory=dict)
    player_buffers: np.ndarray | None = None
    # recorded observations are reused for any edge the reference trace also has that minute
    reference: EventTrace | None = None

    def capacity(self, src: int, dst: int) -> float:
        if dst == CDN:
            return self.cdn_capacity
        return float(self.bandwidth[src, dst])

    def neighborhood(self, u: int) -> Neighborhood:
        t = self.minute
        qoes = {v: self.edge_qoe[(t, u, v)] for v in self.providers[u]}
        return build_neighborhood(u, t, self.providers[u].values(), qoes)

    def neighborhoods(self) -> list[Neighborhood]:
        return [self.neighborhood(u) for u in range(self.n)]

    def viewer_qoes(self) -> list[list[float]]:
        t = self.minute
        return [[self.edge_qoe[(t, u, v)] for v in sorted(self.providers[u])] for u in range(self.n)]

    def to_trace(self) -> EventTrace:
        """The trace recorded so far (minutes 1..current)."""
        return EventTrace(
            n=self.n,
            T=self.minute,
            office_of=self.office_of,
            edges=tuple(self.edges),
            bandwidth=self.bandwidth,
            cdn_capacity=self.cdn_capacity,
            segment_traces=dict(self.segment_traces),
            max_degree=self.max_degree,
        )


@dataclass
class StepResult:
    rewards: dict[int, float]
    segment_traces: dict[int, SegmentTrace]
    neighborhoods: list[Neighborhood]
    done: bool


def _realize_minute(state: EnvState, links: dict[int, list[int]]):
    """Draw throughputs for minute ``state.minute`` and simulate every link."""
    t = state.minute
    minute_edges = []
    state.providers = {}
    for u in range(state.n):
        state.providers[u] = {}
        for v in sorted(links[u]):
            ref = state.reference
            if ref is not None and t <= ref.T and (t, u, v) in ref.segment_traces:
                st = ref.segment_traces[(t, u, v)]
                e = ConnectionEdge(t, u, v, st.bandwidth)
                value = ref.edge_qoe(t, u, v, state.cfg.qoe)
            else:
                factor = state.rng.uniform(state.cfg.jitter, 1.0)
                e = ConnectionEdge(t, u, v, state.capacity(u, v) * factor)
                st = simulate_segments(e.throughput, state.cfg)
                value = qoe(st, state.cfg.qoe)
            state.providers[u][v] = e
            state.segment_traces[(t, u, v)] = st
            state.edge_qoe[(t, u, v)] = value
            minute_edges.append(e)
    state.edges.append(tuple(minute_edges))
    state.player_buffers = np.full(state.n, state.cfg.buffer_seconds)


def start_state(
    *,
    n: int,
    T: int,
    office_of,
    bandwidth,
    cdn_capacity: float,
    max_degree: int,
    initial_links: Mapping[int, list[int]],
    seed: int,
    cfg: EnvConfig = EnvConfig(),
) -> EnvState:
    state = EnvState(
        n=n,
        T=T,
        office_of=tuple(office_of),
        bandwidth=np.asarray(bandwidth, dtype=float),
        cdn_capacity=cdn_capacity,
        max_degree=max_degree,
        cfg=cfg,
        rng=np.random.default_rng(seed),
    )
    _realize_minute(state, {u: list(initial_links.get(u, [])) for u in range(n)})
    return state


def env_reset(trace_or_cfg, seed: int, cfg: EnvConfig = EnvConfig()) -> tuple[EnvState, list[Neighborhood]]:
    """Start an environment from minute 1 of a recorded trace (or of a freshly generated one)."""
    from .generator import GeneratorConfig, generate_event

    if isinstance(trace_or_cfg, GeneratorConfig):
        trace = generate_event(trace_or_cfg, cfg)
    else:
        trace = trace_or_cfg
    state = EnvState(
        n=trace.n,
        T=trace.T,
        office_of=tuple(trace.office_of),
        bandwidth=np.array(trace.bandwidth),
        cdn_capacity=trace.cdn_capacity,
        max_degree=trace.max_degree,
        cfg=cfg,
        rng=np.random.default_rng(seed),
        reference=trace,
    )
    first = trace.edges[0]
    state.edges.append(tuple(first))
    state.providers = {u: {} for u in range(trace.n)}
    for e in first:
        state.providers[e.src][e.dst] = e
        st = trace.segment_traces[(1, e.src, e.dst)]
        state.segment_traces[(1, e.src, e.dst)] = st
        state.edge_qoe[(1, e.src, e.dst)] = trace.edge_qoe(1, e.src, e.dst, cfg.qoe)
    state.player_buffers = np.full(trace.n, cfg.buffer_seconds)
    return state, state.neighborhoods()


def allowed_from_trace(trace: EventTrace, u: int, t: int) -> set[int]:
    return {e.dst for e in trace.provider_edges(u, t) if e.dst != CDN}


def env_step(
    state: EnvState,
    actions: Mapping[int, int],
    action_mask_source: EventTrace | None = None,
) -> StepResult:
    """Apply one action per listed viewer and advance to the next minute.

    With ``action_mask_source`` every chosen provider must be one the recorded trace shows
    the viewer connected to at the minute being established.
    """
    if state.minute >= state.T:
        raise RuntimeError("episode already finished")
    t_next = state.minute + 1
    links = {u: dict(state.providers[u]) for u in range(state.n)}
    for u, v in sorted(actions.items()):
        if v == u:
            raise InvalidActionError(f"viewer {u} cannot connect to itself")
        if not 0 <= v < state.n:
            raise InvalidActionError(f"viewer {u} asked for unknown provider {v}")
        if action_mask_source is not None and v not in allowed_from_trace(action_mask_source, u, t_next):
            raise MaskedActionError(f"edge {u}->{v} is not in the recorded edges of minute {t_next}")
        current = links[u]
        if v in current:
            continue
        if len(current) >= state.max_degree:
            worst = min(current.values(), key=lambda e: (e.throughput, e.dst))
            del current[worst.dst]
        current[v] = None
    state.minute = t_next
    _realize_minute(state, {u: list(links[u]) for u in range(state.n)})
    rewards = {u: state.edge_qoe[(t_next, u, v)] for u, v in actions.items()}
    traces = {u: state.segment_traces[(t_next, u, v)] for u, v in actions.items()}
    return StepResult(rewards, traces, state.neighborhoods(), done=state.minute == state.T)
