"""Core data model for the holacracy simulator.

Every type encodes to a canonical JSON-compatible dict via ``to_dict`` and
decodes with ``from_dict``; ``canonical_json`` is the single serializer used
for event logs, LLM payloads and exports.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from fractions import Fraction
from typing import Any


class InvalidConfig(ValueError):
    """Raised when a configuration cannot describe a runnable organization."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_hours(value: Fraction | float | int) -> int | float | str:
    """Encode workload hours losslessly: ints stay ints, non-integral rationals become "p/q"."""
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return int(value.numerator)
        return f"{value.numerator}/{value.denominator}"
    return value


def decode_hours(value: int | float | str) -> Fraction:
    if isinstance(value, str):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**9) if not value.is_integer() else Fraction(int(value))
    return Fraction(value)


class ManagementMode(str, Enum):
    HOLACRACY = "holacracy"


class Role(str, Enum):
    FACILITATOR = "Facilitator"
    SECRETARY = "Secretary"
    MEMBER = "Member"


class Activity(str, Enum):
    SOLO_WORK = "SoloWork"
    DISCUSSION = "Discussion"
    TACTICAL_MEETING = "TacticalMeeting"


class EventKind(str, Enum):
    MEMBER_GENERATED = "MemberGenerated"
    TASK_ISSUED = "TaskIssued"
    ALLOCATED = "Allocated"
    CIRCLE_ADJUSTED = "CircleAdjusted"
    ROLES_ASSIGNED = "RolesAssigned"
    PLAN_MADE = "PlanMade"
    PLANS_CONSOLIDATED = "PlansConsolidated"
    WORK_EXECUTED = "WorkExecuted"
    MEETING_HELD = "MeetingHeld"
    STRESS_UPDATED = "StressUpdated"
    TASK_SETTLED = "TaskSettled"
    MEMBER_EVALUATED = "MemberEvaluated"
    TRUST_UPDATED = "TrustUpdated"
    CYCLE_SUMMARIZED = "CycleSummarized"


LEVEL_MEANS = {"high": 4.0, "low": 2.0}
LEVEL_STDS = {"high": 0.9, "medium": 0.6, "low": 0.3}
COMPETENCE_MIN = 1.0
COMPETENCE_MAX = 5.0


@dataclass(frozen=True)
class WorldEnvironment:
    org_name: str = "Aurora Talent Lab"
    industry: str = "recruitment technology"
    org_goal: str = "complete every project on the list"
    management_mode: ManagementMode = ManagementMode.HOLACRACY
    work_days_per_week: int = 5
    hours_per_day: int = 8

    def __post_init__(self) -> None:
        if self.work_days_per_week < 1 or self.hours_per_day < 1:
            raise InvalidConfig("work_days_per_week and hours_per_day must be >= 1")
        object.__setattr__(self, "management_mode", ManagementMode(self.management_mode))

    @property
    def hours_per_week(self) -> int:
        return self.work_days_per_week * self.hours_per_day

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["management_mode"] = self.management_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> WorldEnvironment:
        return cls(**d)


@dataclass(frozen=True)
class MemberProfile:
    member_id: str
    name: str
    personality: str
    life_habits: str
    research_direction: str
    management_competence: float
    functional_competence: float

    def __post_init__(self) -> None:
        for value in (self.management_competence, self.functional_competence):
            if not (COMPETENCE_MIN <= value <= COMPETENCE_MAX):
                raise ValueError(f"competence {value} outside [1, 5] for {self.member_id}")

    @property
    def competence_mean(self) -> float:
        return (self.management_competence + self.functional_competence) / 2

    @property
    def competence_difference(self) -> float:
        return abs(self.management_competence - self.functional_competence)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MemberProfile:
        return cls(**d)


@dataclass
class WorkRecord:
    day: int
    task_id: str
    hours: float
    partners: list[str] = field(default_factory=list)
    decision_count: int = 0
    note: str = ""

    def __post_init__(self) -> None:
        if self.hours < 0:
            raise ValueError("work record hours must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> WorkRecord:
        return cls(**d)


@dataclass
class MemoryDigest:
    text: str = ""
    task_hours: dict[str, float] = field(default_factory=dict)
    partner_counts: dict[str, int] = field(default_factory=dict)
    last_evaluation: float | None = None

    def is_empty(self) -> bool:
        return not self.task_hours and not self.partner_counts and self.last_evaluation is None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MemoryDigest:
        return cls(**d)


@dataclass
class MemberState:
    stress: float = 0.0
    assignment_count: int = 0
    work_records: list[WorkRecord] = field(default_factory=list)
    memory_digest: MemoryDigest = field(default_factory=MemoryDigest)
    evaluation: float = 0.5

    def to_dict(self) -> dict[str, Any]:
        return {
            "stress": self.stress,
            "assignment_count": self.assignment_count,
            "work_records": [r.to_dict() for r in self.work_records],
            "memory_digest": self.memory_digest.to_dict(),
            "evaluation": self.evaluation,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MemberState:
        return cls(
            stress=d["stress"],
            assignment_count=d["assignment_count"],
            work_records=[WorkRecord.from_dict(r) for r in d["work_records"]],
            memory_digest=MemoryDigest.from_dict(d["memory_digest"]),
            evaluation=d["evaluation"],
        )


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    title: str
    description: str
    workload_hours: Fraction
    deadline_week: int
    min_members: int
    max_members: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "workload_hours", decode_hours(encode_hours(self.workload_hours)))
        if self.workload_hours <= 0:
            raise ValueError("workload_hours must be > 0")
        if not (1 <= self.min_members <= self.max_members):
            raise ValueError("need 1 <= min_members <= max_members")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["workload_hours"] = encode_hours(self.workload_hours)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskSpec:
        d = dict(d)
        d["workload_hours"] = decode_hours(d["workload_hours"])
        return cls(**d)


@dataclass
class TaskState:
    spec: TaskSpec
    allocation: list[str] = field(default_factory=list)
    # a member holds several roles only in a singleton circle
    roles: dict[str, list[Role]] = field(default_factory=dict)
    hours_logged: dict[str, float] = field(default_factory=dict)
    completion: float = 0.0
    per_member_credit: dict[str, float] = field(default_factory=dict)
    settled: bool = False

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def total_logged(self) -> float:
        return math.fsum(self.hours_logged.values())

    @property
    def remaining(self) -> float:
        return max(0.0, float(self.spec.workload_hours) - self.total_logged)

    def holder(self, role: Role) -> str | None:
        for member_id, held in self.roles.items():
            if role in held:
                return member_id
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "allocation": list(self.allocation),
            "roles": {k: [r.value for r in v] for k, v in self.roles.items()},
            "hours_logged": dict(self.hours_logged),
            "completion": self.completion,
            "per_member_credit": dict(self.per_member_credit),
            "settled": self.settled,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskState:
        return cls(
            spec=TaskSpec.from_dict(d["spec"]),
            allocation=list(d["allocation"]),
            roles={k: [Role(r) for r in v] for k, v in d["roles"].items()},
            hours_logged=dict(d["hours_logged"]),
            completion=d["completion"],
            per_member_credit=dict(d["per_member_credit"]),
            settled=d.get("settled", False),
        )


class TrustMatrix:
    """Symmetric pairwise trust with a fixed unit diagonal."""

    def __init__(self, member_ids: list[str], entries: list[list[float]] | None = None, initial: float = 0.5):
        self.member_ids = list(member_ids)
        self._index = {m: i for i, m in enumerate(self.member_ids)}
        if len(self._index) != len(self.member_ids):
            raise ValueError("duplicate member ids in trust matrix")
        n = len(self.member_ids)
        if entries is None:
            entries = [[1.0 if i == j else initial for j in range(n)] for i in range(n)]
        self.entries = [list(map(float, row)) for row in entries]
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def index(self, member_id: str) -> int:
        return self._index[member_id]

    def get(self, a: str, b: str) -> float:
        return self.entries[self._index[a]][self._index[b]]

    def set(self, a: str, b: str, value: float) -> None:
        if a == b:
            raise ValueError("trust diagonal is fixed at 1.0")
        i, j = self._index[a], self._index[b]
        self.entries[i][j] = self.entries[j][i] = float(value)

    def mean_to(self, a: str, others: list[str]) -> float:
        others = [o for o in others if o != a]
        if not others:
            return 0.0
        return math.fsum(self.get(a, o) for o in others) / len(others)

    def copy(self) -> TrustMatrix:
        return TrustMatrix(self.member_ids, [row[:] for row in self.entries])

    def violations(self) -> list[str]:
        out = []
        n = len(self.member_ids)
        if len(self.entries) != n or any(len(row) != n for row in self.entries):
            return ["shape"]
        for i in range(n):
            if self.entries[i][i] != 1.0:
                out.append("diagonal")
                break
        if any(self.entries[i][j] != self.entries[j][i] for i in range(n) for j in range(i + 1, n)):
            out.append("symmetry")
        if any(not (0.0 <= v <= 1.0) for row in self.entries for v in row):
            out.append("range")
        return out

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TrustMatrix) and self.member_ids == other.member_ids and self.entries == other.entries

    def __repr__(self) -> str:
        return f"TrustMatrix(n={len(self.member_ids)})"

    def to_dict(self) -> dict[str, Any]:
        return {"member_ids": list(self.member_ids), "entries": [row[:] for row in self.entries]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrustMatrix:
        return cls(d["member_ids"], d["entries"])


@dataclass(frozen=True)
class PlanEntry:
    member_id: str
    task_id: str
    hours: float
    partners: tuple[str, ...] = ()
    activity: Activity = Activity.SOLO_WORK

    def __post_init__(self) -> None:
        if self.hours <= 0:
            raise ValueError("plan entry hours must be > 0")
        if self.member_id in self.partners:
            raise ValueError("a member cannot partner with themself")
        object.__setattr__(self, "partners", tuple(sorted(self.partners)))
        object.__setattr__(self, "activity", Activity(self.activity))

    def to_dict(self) -> dict[str, Any]:
        return {
            "member_id": self.member_id,
            "task_id": self.task_id,
            "hours": self.hours,
            "partners": list(self.partners),
            "activity": self.activity.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PlanEntry:
        return cls(d["member_id"], d["task_id"], d["hours"], tuple(d.get("partners", ())), Activity(d["activity"]))


@dataclass(frozen=True)
class DayPlan:
    member_id: str
    entries: tuple[PlanEntry, ...] = ()

    @property
    def total_hours(self) -> float:
        return math.fsum(e.hours for e in self.entries)

    def to_dict(self) -> dict[str, Any]:
        return {"member_id": self.member_id, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DayPlan:
        return cls(d["member_id"], tuple(PlanEntry.from_dict(e) for e in d["entries"]))


@dataclass(frozen=True)
class PlanGroup:
    """One slot of the world plan: a solo entry or a merged joint session."""

    task_id: str
    activity: Activity
    members: tuple[str, ...]
    hours: float

    @property
    def is_joint(self) -> bool:
        return len(self.members) > 1

    def sort_key(self) -> tuple[str, str, str]:
        return (self.task_id, self.activity.value, min(self.members))

    def to_dict(self) -> dict[str, Any]:
        return {"task_id": self.task_id, "activity": self.activity.value, "members": list(self.members), "hours": self.hours}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PlanGroup:
        return cls(d["task_id"], Activity(d["activity"]), tuple(d["members"]), d["hours"])


@dataclass(frozen=True)
class WorldPlan:
    groups: tuple[PlanGroup, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"groups": [g.to_dict() for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> WorldPlan:
        return cls(tuple(PlanGroup.from_dict(g) for g in d["groups"]))


@dataclass(frozen=True)
class DynamicsParams:
    w_hours: float = 0.05
    w_decisions: float = 0.15
    recovery: float = 0.1
    sensitivity_floor: float = 0.2
    trust_rate: float = 0.1
    trust_threshold: float = 0.7

    def __post_init__(self) -> None:
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise InvalidConfig("dynamics parameters must be non-negative")
        if self.sensitivity_floor <= 0:
            raise InvalidConfig("sensitivity_floor must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DynamicsParams:
        return cls(**d)


BRAINS = ("deterministic", "llm")
MEAN_LEVELS = tuple(LEVEL_MEANS)
STD_LEVELS = ("high", "medium", "low")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    n_members: int = 20
    tasks_per_week: int = 4
    weeks: int = 8
    mgmt_mean_level: str = "high"
    func_mean_level: str = "high"
    mgmt_std_level: str = "medium"
    func_std_level: str = "medium"
    brain: str = "deterministic"
    min_members: int = 2
    max_members: int = 6
    world: WorldEnvironment = field(default_factory=WorldEnvironment)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)

    def __post_init__(self) -> None:
        if not (0 <= self.seed < 2**64):
            raise InvalidConfig("seed must be a 64-bit unsigned integer")
        if self.weeks < 0:
            raise InvalidConfig("weeks must be >= 0")
        for name in ("mgmt_mean_level", "func_mean_level"):
            if getattr(self, name) not in MEAN_LEVELS:
                raise InvalidConfig(f"{name} must be one of {MEAN_LEVELS}")
        for name in ("mgmt_std_level", "func_std_level"):
            if getattr(self, name) not in STD_LEVELS:
                raise InvalidConfig(f"{name} must be one of {STD_LEVELS}")
        if self.brain not in BRAINS:
            raise InvalidConfig(f"brain must be one of {BRAINS}")
        if not (1 <= self.min_members <= self.max_members):
            raise InvalidConfig("need 1 <= min_members <= max_members")

    def task_bounds(self) -> tuple[int, int]:
        """Member bounds for generated tasks, capped by the organization size."""
        hi = min(self.max_members, self.n_members)
        return min(self.min_members, hi), hi

    def replace(self, **changes: Any) -> SimConfig:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SimConfig(**d)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["world"] = self.world.to_dict()
        d["dynamics"] = self.dynamics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SimConfig:
        d = dict(d)
        if "world" in d:
            d["world"] = WorldEnvironment.from_dict(d["world"])
        if "dynamics" in d:
            d["dynamics"] = DynamicsParams.from_dict(d["dynamics"])
        return cls(**d)


@dataclass(frozen=True)
class EventLogEntry:
    week: int
    day: int
    sequence_no: int
    kind: EventKind
    payload: dict[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EventKind(self.kind))

    def order_key(self) -> tuple[int, int, int]:
        return (self.week, self.day, self.sequence_no)

    def to_dict(self) -> dict[str, Any]:
        return {
            "week": self.week,
            "day": self.day,
            "sequence_no": self.sequence_no,
            "kind": self.kind.value,
            "payload": self.payload,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EventLogEntry:
        return cls(d["week"], d["day"], d["sequence_no"], EventKind(d["kind"]), d["payload"])


def validate_workload_balance(config: SimConfig) -> Fraction:
    """Per-task workload that balances weekly capacity against issued work.

    ``N * hours_per_day * work_days_per_week == M * WT``, solved exactly.
    """
    if config.n_members <= 0 or config.tasks_per_week <= 0:
        raise InvalidConfig("n_members and tasks_per_week must both be positive")
    workload = Fraction(config.n_members * config.world.hours_per_week, config.tasks_per_week)
    if workload <= 0:
        raise InvalidConfig("workload per task must be positive")
    return workload


def validate_task_state(state: TaskState, org_size: int) -> list[str]:
    """Names of every violated TaskState invariant; empty when valid."""
    violations: list[str] = []
    spec = state.spec
    if not (1 <= spec.min_members <= spec.max_members <= org_size):
        violations.append("member bounds")
    if spec.workload_hours <= 0:
        violations.append("workload")
    n = len(state.allocation)
    if not (spec.min_members <= n <= spec.max_members):
        violations.append("allocation size")
    if len(set(state.allocation)) != n:
        violations.append("allocation duplicates")
    facilitators = [m for m, held in state.roles.items() if Role.FACILITATOR in held]
    secretaries = [m for m, held in state.roles.items() if Role.SECRETARY in held]
    if len(facilitators) != 1 or len(secretaries) != 1:
        violations.append("role cardinality")
    elif facilitators == secretaries and n != 1:
        violations.append("role separation")
    if not set(state.roles) <= set(state.allocation):
        violations.append("roles outside allocation")
    if not set(state.hours_logged) <= set(state.allocation):
        violations.append("hours outside allocation")
    if not (0.0 <= state.completion <= 1.0):
        violations.append("completion range")
    return violations


@dataclass(frozen=True)
class CompetenceSpec:
    """Normal sampling parameters for the two competence dimensions."""

    mgmt_mean: float
    mgmt_std: float
    func_mean: float
    func_std: float

    @classmethod
    def from_levels(cls, mgmt_mean: str, func_mean: str, mgmt_std: str, func_std: str) -> CompetenceSpec:
        return cls(LEVEL_MEANS[mgmt_mean], LEVEL_STDS[mgmt_std], LEVEL_MEANS[func_mean], LEVEL_STDS[func_std])

    @classmethod
    def from_config(cls, config: SimConfig) -> CompetenceSpec:
        return cls.from_levels(config.mgmt_mean_level, config.func_mean_level, config.mgmt_std_level, config.func_std_level)
