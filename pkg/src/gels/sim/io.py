"""JSON Lines trace files: a header line, then one record per edge-minute."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..graph import CDN, ConnectionEdge, EventTrace
from ..qoe import Segment, SegmentTrace, count_rebuffers

DEFAULT_BUFFER_SECONDS = 8.0


class TraceParseError(ValueError):
    pass


def save_event_trace(trace: EventTrace, path, buffer_seconds: float | None = None) -> None:
    if buffer_seconds is None:
        any_trace = next(iter(trace.segment_traces.values()))
        buffer_seconds = any_trace.buffer_seconds
    header = {
        "n": trace.n,
        "T": trace.T,
        "offices": list(trace.office_of),
        "max_degree": trace.max_degree,
        "cdn_capacity": trace.cdn_capacity,
        "buffer_seconds": buffer_seconds,
        "bandwidth": trace.bandwidth.tolist(),
    }
    lines = [json.dumps(header)]
    for minute_edges in trace.edges:
        for e in sorted(minute_edges, key=lambda e: (e.src, e.dst)):
            st = trace.segment_traces[(e.minute, e.src, e.dst)]
            rec = {
                "minute": e.minute,
                "src": e.src,
                "dst": "CDN" if e.dst == CDN else e.dst,
                "throughput_mbps": e.throughput,
                "segments": [{"q": s.quality, "bits_mb": s.bits_mb} for s in st.segments],
                "rebuffers": _rebuffers(st),
            }
            lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _rebuffers(st: SegmentTrace) -> int:
    return count_rebuffers(st.sizes, st.bandwidth, st.buffer_seconds)


def _fail(lineno: int, msg: str):
    raise TraceParseError(f"line {lineno}: {msg}")


def _number(rec, key, lineno):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(lineno, f"'{key}' must be a finite number, got {v!r}")
    return float(v)


def _integer(rec, key, lineno):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(lineno, f"'{key}' must be an integer, got {v!r}")
    return v


def load_event_trace(path) -> EventTrace:
    """Parse a trace file.

    Files from other sources may omit the pairwise ``bandwidth`` matrix and ``cdn_capacity``;
    they are then taken as the largest throughput observed on each link.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = [line for line in text.split("\n") if line.strip()]
    if not rows:
        raise TraceParseError("empty trace file")
    try:
        header = json.loads(rows[0])
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"line 1: invalid JSON ({exc})") from None
    n = _integer(header, "n", 1)
    T = _integer(header, "T", 1)
    offices = header.get("offices")
    if not isinstance(offices, list) or len(offices) != n:
        _fail(1, "'offices' must list one office per viewer")
    max_degree = header.get("max_degree", 2)
    buffer_seconds = float(header.get("buffer_seconds", DEFAULT_BUFFER_SECONDS))

    edges: list[list[ConnectionEdge]] = [[] for _ in range(T)]
    traces = {}
    observed = np.zeros((n, n))
    cdn_seen = 0.0
    for lineno, line in enumerate(rows[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            _fail(lineno, f"invalid JSON ({exc})")
        minute = _integer(rec, "minute", lineno)
        if not 1 <= minute <= T:
            _fail(lineno, f"minute {minute} outside [1, {T}]")
        src = _integer(rec, "src", lineno)
        if not 0 <= src < n:
            _fail(lineno, f"src {src} outside [0, {n})")
        dst = rec.get("dst")
        if dst == "CDN":
            dst = CDN
        elif isinstance(dst, bool) or not isinstance(dst, int) or not 0 <= dst < n:
            _fail(lineno, f"dst must be a viewer id or \"CDN\", got {dst!r}")
        if dst == src:
            _fail(lineno, f"self-loop on viewer {src}")
        tp = _number(rec, "throughput_mbps", lineno)
        if tp < 0:
            _fail(lineno, f"negative throughput {tp}")
        segs = rec.get("segments")
        if not isinstance(segs, list) or len(segs) < 2:
            _fail(lineno, "'segments' must list at least two segments")
        parsed = []
        for s in segs:
            if not isinstance(s, dict):
                _fail(lineno, "segment entries must be objects")
            q = _integer(s, "q", lineno)
            bits = _number(s, "bits_mb", lineno)
            if bits < 0:
                _fail(lineno, f"negative segment size {bits}")
            parsed.append(Segment(q, bits))
        rebuf = _integer(rec, "rebuffers", lineno)
        if rebuf < 0:
            _fail(lineno, f"negative rebuffer count {rebuf}")
        edges[minute - 1].append(ConnectionEdge(minute, src, dst, tp))
        traces[(minute, src, dst)] = SegmentTrace(tuple(parsed), tp, buffer_seconds)
        if dst == CDN:
            cdn_seen = max(cdn_seen, tp)
        else:
            observed[src, dst] = observed[dst, src] = max(observed[src, dst], tp)

    if "bandwidth" in header:
        bw = np.array(header["bandwidth"], dtype=float)
    else:
        bw = observed
    cdn_capacity = float(header.get("cdn_capacity", cdn_seen))
    try:
        return EventTrace(
            n=n,
            T=T,
            office_of=tuple(offices),
            edges=tuple(tuple(sorted(m, key=lambda e: (e.src, e.dst))) for m in edges),
            bandwidth=bw,
            cdn_capacity=cdn_capacity,
            segment_traces=traces,
            max_degree=max_degree,
        )
    except ValueError as exc:
        raise TraceParseError(str(exc)) from None
