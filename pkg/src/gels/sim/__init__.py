from ..qoe import count_rebuffers
from .env import (
    EnvConfig,
    EnvState,
    InvalidActionError,
    LadderConfig,
    MaskedActionError,
    StepResult,
    allowed_from_trace,
    env_reset,
    env_step,
    simulate_segments,
)
from .generator import GeneratorConfig, generate_event
from .io import TraceParseError, load_event_trace, save_event_trace

__all__ = [
    "EnvConfig",
    "EnvState",
    "GeneratorConfig",
    "InvalidActionError",
    "LadderConfig",
    "MaskedActionError",
    "StepResult",
    "TraceParseError",
    "allowed_from_trace",
    "count_rebuffers",
    "env_reset",
    "env_step",
    "generate_event",
    "load_event_trace",
    "save_event_trace",
    "simulate_segments",
]
