"""Behavioral update rules: stress, task completion, member evaluation, trust."""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

from .domain import DynamicsParams, MemberProfile, MemberState, TaskState, TrustMatrix

__all__ = [
    "DynamicsParams",
    "stress_sensitivity",
    "stress_step",
    "completion_ratio",
    "member_evaluation",
    "trust_update",
]


def stress_sensitivity(profile: MemberProfile, params: DynamicsParams) -> float:
    # (10 - 2) / 8 == 1 at the lowest competence, floored for the most competent
    return max(params.sensitivity_floor, (10.0 - profile.management_competence - profile.functional_competence) / 8.0)


def stress_step(
    state: MemberState,
    hours: float,
    decisions: int,
    profile: MemberProfile,
    params: DynamicsParams,
) -> float:
    """Stress after one working day.

    Prior stress decays by ``recovery``; the day's load adds a linear hours
    term, a linear decisions term and their product, all scaled by the
    member's competence-dependent sensitivity.
    """
    if hours < 0:
        raise ValueError("hours must be >= 0")
    load = (
        params.w_hours * hours
        + params.w_decisions * decisions
        + params.w_hours * params.w_decisions * hours * decisions
    )
    return max(0.0, state.stress * (1.0 - params.recovery) + stress_sensitivity(profile, params) * load)


def completion_ratio(task: TaskState) -> float:
    workload = float(task.spec.workload_hours)
    if workload <= 0:
        raise ValueError("task workload must be positive")
    return min(1.0, task.total_logged / workload)


def member_evaluation(credits: Sequence[float]) -> float | None:
    """Mean completion credit over a member's tasks; None when there are none."""
    if not credits:
        return None
    return math.fsum(credits) / len(credits)


def trust_update(trust: TrustMatrix, settled_tasks: Iterable[TaskState], params: DynamicsParams) -> TrustMatrix:
    """New trust matrix after settling tasks.

    Each co-member pair of a settled circle moves by
    ``trust_rate * (completion - trust_threshold)``, clamped to [0, 1].
    Pairs sharing several tasks move once per task, in task order.
    """
    updated = trust.copy()
    for task in settled_tasks:
        delta = params.trust_rate * (task.completion - params.trust_threshold)
        members = sorted(set(task.allocation))
        for a_idx, a in enumerate(members):
            for b in members[a_idx + 1 :]:
                updated.set(a, b, min(1.0, max(0.0, updated.get(a, b) + delta)))
    return updated
