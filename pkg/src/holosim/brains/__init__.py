"""Decision-policy backends."""
from __future__ import annotations

from .base import (
    AllocationInfeasible,
    BackendError,
    BackendErrorKind,
    Brain,
    BrainRequest,
    BrainResponse,
    DecisionKind,
    PlanContext,
)
from .deterministic import DeterministicBrain


def make_brain(config, llm_config=None) -> Brain:
    if config.brain == "deterministic":
        return DeterministicBrain(hours_per_week=config.world.hours_per_week)
    from .llm import LlmBrain, LlmEndpointConfig

    return LlmBrain(llm_config or LlmEndpointConfig.from_env())


__all__ = [
    "AllocationInfeasible",
    "BackendError",
    "BackendErrorKind",
    "Brain",
    "BrainRequest",
    "BrainResponse",
    "DecisionKind",
    "DeterministicBrain",
    "PlanContext",
    "make_brain",
]
