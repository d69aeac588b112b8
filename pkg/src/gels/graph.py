"""Evolving viewer graph of one streaming event."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .qoe import QoeConfig, SegmentTrace, qoe

# provider id used for edges served straight from the CDN
CDN = -1

ViewerId = int


@dataclass(frozen=True, order=True)
class ConnectionEdge:
    minute: int
    src: ViewerId
    dst: ViewerId
    throughput: float

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"self-loop on viewer {self.src} at minute {self.minute}")
        if not np.isfinite(self.throughput) or self.throughput < 0:
            raise ValueError(f"bad throughput {self.throughput} on edge {self.src}->{self.dst}")


@dataclass(frozen=True)
class Neighborhood:
    viewer: ViewerId
    minute: int
    providers: tuple[tuple[ViewerId, float, float], ...]

    @property
    def ids(self) -> list[ViewerId]:
        return [p[0] for p in self.providers]

    @property
    def qoes(self) -> list[float]:
        return [p[2] for p in self.providers]

    def qoe_map(self) -> dict[ViewerId, float]:
        return {v: q for v, _, q in self.providers}

    def __len__(self):
        return len(self.providers)


@dataclass(frozen=True, eq=False)
class EventTrace:
    """Immutable record of an event: who was connected to whom, minute by minute.

    ``edges[t - 1]`` holds the connections of minute ``t``; ``segment_traces`` is keyed by
    ``(minute, src, dst)``.
    """

    n: int
    T: int
    office_of: tuple[int, ...]
    edges: tuple[tuple[ConnectionEdge, ...], ...]
    bandwidth: np.ndarray
    cdn_capacity: float
    segment_traces: Mapping[tuple[int, int, int], SegmentTrace]
    max_degree: int = 2
    _by_viewer: dict = field(default=None, repr=False, compare=False)
    _qoe_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.office_of) != self.n:
            raise ValueError("office_of must list one office per viewer")
        if len(self.edges) != self.T:
            raise ValueError(f"expected {self.T} minutes of edges, got {len(self.edges)}")
        bw = np.array(self.bandwidth, dtype=float)
        if bw.shape != (self.n, self.n) or not np.allclose(bw, bw.T):
            raise ValueError("bandwidth must be a symmetric n x n matrix")
        bw.setflags(write=False)
        object.__setattr__(self, "bandwidth", bw)

        by_viewer: dict[tuple[int, int], list[ConnectionEdge]] = {}
        for t, minute_edges in enumerate(self.edges, start=1):
            if not minute_edges:
                raise ValueError(f"minute {t} has no edges")
            for e in minute_edges:
                if e.minute != t:
                    raise ValueError(f"edge {e.src}->{e.dst} filed under minute {t} but stamped {e.minute}")
                if not 0 <= e.src < self.n or not (e.dst == CDN or 0 <= e.dst < self.n):
                    raise ValueError(f"edge {e.src}->{e.dst} at minute {t} references an unknown viewer")
                if e.throughput > self.capacity(e.src, e.dst) + 1e-9:
                    raise ValueError(f"edge {e.src}->{e.dst} at minute {t} exceeds link capacity")
                by_viewer.setdefault((t, e.src), []).append(e)
        for (t, u), lst in by_viewer.items():
            if len(lst) > self.max_degree:
                raise ValueError(f"viewer {u} has {len(lst)} providers at minute {t}")
            if len({e.dst for e in lst}) != len(lst):
                raise ValueError(f"viewer {u} has duplicate providers at minute {t}")
            lst.sort(key=lambda e: e.dst)
        object.__setattr__(self, "_by_viewer", by_viewer)

    def capacity(self, src: int, dst: int) -> float:
        if dst == CDN:
            return self.cdn_capacity
        return float(self.bandwidth[src, dst])

    def edge_qoe(self, t: int, src: ViewerId, dst: ViewerId, cfg: QoeConfig = QoeConfig()) -> float:
        key = (t, src, dst, cfg)
        if key not in self._qoe_cache:
            self._qoe_cache[key] = qoe(self.segment_traces[(t, src, dst)], cfg)
        return self._qoe_cache[key]

    def provider_edges(self, u: ViewerId, t: int) -> list[ConnectionEdge]:
        return list(self._by_viewer.get((t, u), ()))

    def __eq__(self, other):
        if not isinstance(other, EventTrace):
            return NotImplemented
        return (
            self.n == other.n
            and self.T == other.T
            and tuple(self.office_of) == tuple(other.office_of)
            and self.edges == other.edges
            and np.array_equal(self.bandwidth, other.bandwidth)
            and self.cdn_capacity == other.cdn_capacity
            and dict(self.segment_traces) == dict(other.segment_traces)
            and self.max_degree == other.max_degree
        )

    __hash__ = None


def _check_minute(trace: EventTrace, t: int):
    if not 1 <= t <= trace.T:
        raise IndexError(f"minute {t} outside [1, {trace.T}]")


def snapshot(trace: EventTrace, t: int) -> frozenset[ConnectionEdge]:
    _check_minute(trace, t)
    return frozenset(trace.edges[t - 1])


def neighborhood(trace: EventTrace, u: ViewerId, t: int, cfg: QoeConfig = QoeConfig()) -> Neighborhood:
    _check_minute(trace, t)
    if not 0 <= u < trace.n:
        raise IndexError(f"viewer {u} outside [0, {trace.n})")
    providers = tuple(
        (e.dst, e.throughput, trace.edge_qoe(t, e.src, e.dst, cfg))
        for e in trace.provider_edges(u, t)
    )
    return Neighborhood(u, t, providers)


def neighborhoods(trace: EventTrace, t: int, cfg: QoeConfig = QoeConfig()) -> list[Neighborhood]:
    return [neighborhood(trace, u, t, cfg) for u in range(trace.n)]


def build_neighborhood(u: ViewerId, t: int, edges: Sequence[ConnectionEdge], qoes: Mapping[int, float]) -> Neighborhood:
    ordered = sorted(edges, key=lambda e: e.dst)
    return Neighborhood(u, t, tuple((e.dst, e.throughput, qoes[e.dst]) for e in ordered))
