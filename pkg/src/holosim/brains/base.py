"""Decision-policy interface shared by every brain backend."""
from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from ..domain import (
    CompetenceSpec,
    DayPlan,
    MemberProfile,
    MemoryDigest,
    TaskSpec,
    TaskState,
    TrustMatrix,
    WorkRecord,
    WorldEnvironment,
)

TEMPLATE_VERSION = "1"


class DecisionKind(str, Enum):
    GENERATE_MEMBERS = "generate_members"
    GENERATE_TASKS = "generate_tasks"
    ALLOCATE_MEMBERS = "allocate_members"
    ADJUST_CIRCLE = "adjust_circle"
    ASSIGN_ROLES = "assign_roles"
    PLAN_DAY = "plan_day"
    SUMMARIZE_CYCLE = "summarize_cycle"


class BackendErrorKind(str, Enum):
    TIMEOUT = "Timeout"
    HTTP_STATUS = "HttpStatus"
    SCHEMA_INVALID = "SchemaInvalid"
    RETRIES_EXHAUSTED = "RetriesExhausted"


class BackendError(RuntimeError):
    def __init__(self, kind: BackendErrorKind, message: str, *, cause: BackendError | None = None, attempts: int = 0):
        super().__init__(f"{kind.value}: {message}")
        self.kind = kind
        self.cause = cause
        self.attempts = attempts


class AllocationInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class BrainRequest:
    kind: DecisionKind
    context: dict[str, Any]


@dataclass
class BrainResponse:
    kind: DecisionKind
    data: dict[str, Any]
    repairs: int = 0
    attempts: int = 1


@dataclass
class PlanContext:
    """Everything a member sees when planning one day."""

    member: MemberProfile
    tasks: list[TaskState]
    trust: TrustMatrix
    day: int
    hours_per_day: int
    records: list[WorkRecord] = field(default_factory=list)
    stress: float = 0.0
    memory: MemoryDigest = field(default_factory=MemoryDigest)

    @property
    def completions(self) -> dict[str, float]:
        return {t.task_id: min(1.0, t.total_logged / float(t.spec.workload_hours)) for t in self.tasks}


class Brain(abc.ABC):
    """One decision policy standing in for every generative call of a run."""

    name: str = "abstract"
    template_version: str = TEMPLATE_VERSION

    @abc.abstractmethod
    def generate_members(
        self, env: WorldEnvironment, n: int, competence: CompetenceSpec, rng: np.random.Generator
    ) -> list[MemberProfile]: ...

    @abc.abstractmethod
    def generate_tasks(
        self,
        env: WorldEnvironment,
        n_members: int,
        m: int,
        rng: np.random.Generator,
        *,
        week: int = 1,
        bounds: tuple[int, int] = (2, 6),
    ) -> list[TaskSpec]: ...

    @abc.abstractmethod
    def allocate_members(
        self,
        task: TaskSpec,
        profiles: list[MemberProfile],
        trust: TrustMatrix,
        assignment_counts: dict[str, int],
        rng: np.random.Generator | None = None,
    ) -> list[str]: ...

    @abc.abstractmethod
    def adjust_circle(self, task: TaskSpec, trust: TrustMatrix, allocation: list[str]) -> list[str]: ...

    @abc.abstractmethod
    def assign_roles(self, task: TaskSpec, allocation: list[str], profiles: list[MemberProfile]) -> dict[str, list]: ...

    @abc.abstractmethod
    def plan_day(self, ctx: PlanContext, rng: np.random.Generator | None = None) -> DayPlan: ...

    def plan_all(self, contexts: list[PlanContext], rng: np.random.Generator | None = None) -> list[DayPlan]:
        """Plans for every member, returned in input order."""
        return [self.plan_day(ctx, rng) for ctx in contexts]

    @abc.abstractmethod
    def summarize_cycle(self, records: list[WorkRecord], evaluation: float | None = None) -> MemoryDigest: ...


def check_bounds(task: TaskSpec, org_size: int) -> None:
    if task.min_members > org_size:
        raise AllocationInfeasible(
            f"task {task.task_id} needs at least {task.min_members} members but the organization has {org_size}"
        )


def aggregate_records(records: list[WorkRecord]) -> tuple[dict[str, float], dict[str, int]]:
    """Per-task hour totals and partner frequencies over a cycle's records."""
    hours: dict[str, list[float]] = {}
    partners: dict[str, int] = {}
    for rec in records:
        hours.setdefault(rec.task_id, []).append(rec.hours)
        for p in rec.partners:
            partners[p] = partners.get(p, 0) + 1
    totals = {task_id: math.fsum(v) for task_id, v in sorted(hours.items())}
    return totals, dict(sorted(partners.items()))
