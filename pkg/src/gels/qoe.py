"""User-experience scoring for a single connection-minute and its derived labels."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

EPS_KL = 1e-6


class QoeLabel(enum.IntEnum):
    BAD = 0
    POOR = 1
    FAIR = 2
    GOOD = 3
    EXCELLENT = 4


class ConnectionLevel(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2


# centre of each equal-width bin on the normalized scale
LABEL_CENTERS = {label: 0.1 + 0.2 * label.value for label in QoeLabel}


@dataclass(frozen=True)
class Segment:
    quality: int
    bits_mb: float


@dataclass(frozen=True)
class SegmentTrace:
    """K segments delivered over one connection during one minute."""

    segments: tuple[Segment, ...]
    bandwidth: float
    buffer_seconds: float

    def __post_init__(self):
        if len(self.segments) < 2:
            raise ValueError(f"a segment trace needs at least 2 segments, got {len(self.segments)}")
        if not self.buffer_seconds > 0:
            raise ValueError("buffer_seconds must be positive")

    @property
    def qualities(self) -> list[int]:
        return [s.quality for s in self.segments]

    @property
    def sizes(self) -> list[float]:
        return [s.bits_mb for s in self.segments]


@dataclass(frozen=True)
class QoeConfig:
    lam: float = 0.2
    mu: float = 0.3
    q_max: int = 5

    def __post_init__(self):
        for name in ("lam", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.q_max <= 0:
            raise ValueError("q_max must be positive")


def avg_quality(trace: SegmentTrace | Sequence[int]) -> float:
    q = trace.qualities if isinstance(trace, SegmentTrace) else list(trace)
    if not q:
        raise ValueError("average quality of an empty trace is undefined")
    return sum(q) / len(q)


def avg_variation(trace: SegmentTrace | Sequence[int]) -> float:
    q = trace.qualities if isinstance(trace, SegmentTrace) else list(trace)
    if len(q) < 2:
        raise ValueError("quality variation needs at least two segments")
    return sum(abs(b - a) for a, b in zip(q, q[1:])) / (len(q) - 1)


def count_rebuffers(segment_bits: Sequence[float], bandwidth: float, buffer_seconds: float) -> int:
    """Number of segments whose download time exceeds the player buffer.

    A dead link (``bandwidth == 0``) stalls on every segment.
    """
    if buffer_seconds <= 0:
        raise ValueError("buffer_seconds must be positive")
    if bandwidth < 0:
        raise ValueError("bandwidth must be nonnegative")
    if bandwidth == 0:
        return len(segment_bits)
    return sum(1 for d in segment_bits if d / bandwidth > buffer_seconds)


def qoe(trace: SegmentTrace, cfg: QoeConfig = QoeConfig()) -> float:
    rebuf = count_rebuffers(trace.sizes, trace.bandwidth, trace.buffer_seconds)
    return avg_quality(trace) - cfg.lam * avg_variation(trace) - cfg.mu * rebuf


def normalize_qoe(value: float, cfg: QoeConfig = QoeConfig()) -> float:
    return min(max(value / cfg.q_max, 0.0), 1.0)


def viewer_qoe(provider_qoes: Sequence[float]) -> float | None:
    """Mean over a viewer's provider edges; ``None`` when it has no providers."""
    if len(provider_qoes) == 0:
        return None
    return sum(provider_qoes) / len(provider_qoes)


def label_of(normalized: float) -> QoeLabel:
    x = min(max(normalized, 0.0), 1.0)
    # left-closed bins, the top one closed on both ends
    return QoeLabel(min(int(math.floor(x * 5)), 4))


def label_viewer(provider_qoes: Sequence[float], cfg: QoeConfig = QoeConfig()) -> QoeLabel:
    v = viewer_qoe(provider_qoes)
    if v is None:
        return QoeLabel.BAD
    return label_of(normalize_qoe(v, cfg))


def kl_divergence(
    qoe_t: Mapping[int, float], qoe_t1: Mapping[int, float], eps: float = EPS_KL
) -> tuple[float, bool]:
    """Unnormalized KL of next-minute provider QoE against the current minute.

    Only providers present in both maps contribute. Returns ``(value, defined)``;
    ``defined`` is False when the maps share no provider, in which case the value is 0.
    """
    common = sorted(set(qoe_t) & set(qoe_t1))
    if not common:
        return 0.0, False
    total = 0.0
    for v in common:
        p = max(qoe_t1[v], eps)
        q = max(qoe_t[v], eps)
        total += p * math.log(p / q)
    return total, True


def connection_level(throughput: float) -> ConnectionLevel:
    if throughput < 0:
        raise ValueError("throughput must be nonnegative")
    if throughput < 5:
        return ConnectionLevel.LOW
    if throughput <= 10:
        return ConnectionLevel.MEDIUM
    return ConnectionLevel.HIGH
