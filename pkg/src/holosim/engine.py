"""Weekly construction, daily execution and end-of-week evaluation of one run."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import dynamics
from .brains import Brain, BackendError, BackendErrorKind, PlanContext, make_brain
from .domain import (
    Activity,
    CompetenceSpec,
    DayPlan,
    EventKind,
    EventLogEntry,
    InvalidConfig,
    MemberProfile,
    MemberState,
    PlanGroup,
    Role,
    SimConfig,
    TaskState,
    TrustMatrix,
    WorkRecord,
    WorldPlan,
    canonical_json,
    encode_hours,
    validate_task_state,
    validate_workload_balance,
)
from .rng import make_streams

log = logging.getLogger(__name__)

EVALUATION_DAY = 6


@dataclass
class RunState:
    config: SimConfig
    brain: Brain
    profiles: list[MemberProfile]
    members: dict[str, MemberState]
    trust: TrustMatrix
    rng: dict[str, np.random.Generator]
    active_tasks: list[TaskState] = field(default_factory=list)
    settled_tasks: list[TaskState] = field(default_factory=list)
    week: int = 0
    day: int = 0
    events: list[EventLogEntry] = field(default_factory=list)
    snapshots: list[dict[str, Any]] = field(default_factory=list)
    evaluated_weeks: set[int] = field(default_factory=set)
    committed: int = 0

    @property
    def env(self):
        return self.config.world

    @property
    def profile_by_id(self) -> dict[str, MemberProfile]:
        return {p.member_id: p for p in self.profiles}

    def emit(self, kind: EventKind, payload: dict[str, Any]) -> EventLogEntry:
        entry = EventLogEntry(self.week, self.day, len(self.events), kind, payload)
        self.events.append(entry)
        return entry

    def commit(self) -> None:
        self.committed = len(self.events)

    def tasks_of(self, member_id: str) -> list[TaskState]:
        return [t for t in self.active_tasks if member_id in t.allocation]


def init_state(config: SimConfig, brain: Brain | None = None) -> RunState:
    if config.n_members < 1:
        raise InvalidConfig("an organization needs at least one member")
    validate_workload_balance(config)
    brain = brain or make_brain(config)
    rng = make_streams(config.seed)
    profiles = brain.generate_members(config.world, config.n_members, CompetenceSpec.from_config(config), rng["members"])
    ids = [p.member_id for p in profiles]
    if len(profiles) != config.n_members or len(set(ids)) != len(ids):
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, "member generation returned a malformed roster")
    state = RunState(
        config=config,
        brain=brain,
        profiles=profiles,
        members={m: MemberState() for m in ids},
        trust=TrustMatrix(ids),
        rng=rng,
    )
    for p in profiles:
        state.emit(EventKind.MEMBER_GENERATED, {"profile": p.to_dict(), "brain": brain.name, "template_version": brain.template_version})
    state.commit()
    return state


def _check_allocation(state: RunState, task: TaskState, allocation: list[str], what: str) -> None:
    known = state.members
    spec = task.spec
    if len(set(allocation)) != len(allocation) or any(m not in known for m in allocation):
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"{what} for {spec.task_id} names unknown or repeated members")
    if not (spec.min_members <= len(allocation) <= spec.max_members):
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"{what} for {spec.task_id} breaks member bounds")


def run_construction(state: RunState) -> RunState:
    """Issue, staff, vote on and assign roles for one week's tasks."""
    cfg = state.config
    if not state.members:
        raise InvalidConfig("empty organization")
    validate_workload_balance(cfg)
    state.week += 1
    state.day = 0
    specs = state.brain.generate_tasks(
        cfg.world, cfg.n_members, cfg.tasks_per_week, state.rng["tasks"], week=state.week, bounds=cfg.task_bounds()
    )
    if len(specs) != cfg.tasks_per_week:
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, "task generation returned the wrong number of tasks")
    for spec in specs:
        state.emit(EventKind.TASK_ISSUED, {"task": spec.to_dict(), "template_version": state.brain.template_version})
    counts = {m: s.assignment_count for m, s in state.members.items()}
    for spec in specs:
        task = TaskState(spec)
        allocation = state.brain.allocate_members(spec, state.profiles, state.trust, dict(counts), state.rng["allocation"])
        _check_allocation(state, task, allocation, "allocation")
        state.emit(EventKind.ALLOCATED, {"task_id": spec.task_id, "allocation": list(allocation)})
        for m in allocation:
            counts[m] += 1
        adjusted = state.brain.adjust_circle(spec, state.trust, list(allocation))
        _check_allocation(state, task, adjusted, "circle adjustment")
        if not set(adjusted) <= set(allocation):
            raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"circle adjustment for {spec.task_id} added members")
        dropped = [m for m in allocation if m not in adjusted]
        for m in dropped:
            counts[m] -= 1
        state.emit(
            EventKind.CIRCLE_ADJUSTED, {"task_id": spec.task_id, "allocation": list(adjusted), "dropped": dropped}
        )
        task.allocation = list(adjusted)
        task.roles = state.brain.assign_roles(spec, list(adjusted), state.profiles)
        problems = validate_task_state(task, cfg.n_members)
        if problems:
            raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"task {spec.task_id} invalid: {', '.join(problems)}")
        state.emit(
            EventKind.ROLES_ASSIGNED,
            {"task_id": spec.task_id, "roles": {m: [r.value for r in held] for m, held in sorted(task.roles.items())}},
        )
        state.active_tasks.append(task)
    for m, s in state.members.items():
        s.assignment_count = counts[m]
    return state


def _check_plan(state: RunState, plan: DayPlan, member_id: str) -> None:
    hpd = state.env.hours_per_day
    if plan.member_id != member_id:
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"plan for {member_id} is labelled {plan.member_id}")
    if plan.total_hours > hpd + 1e-9:
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"plan for {member_id} exceeds {hpd}h")
    mine = {t.task_id: t for t in state.tasks_of(member_id)}
    for e in plan.entries:
        if e.member_id != member_id or e.task_id not in mine:
            raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"plan for {member_id} names a foreign task")
        if not set(e.partners) <= set(mine[e.task_id].allocation):
            raise BackendError(BackendErrorKind.SCHEMA_INVALID, f"plan for {member_id} names partners outside the circle")


def consolidate_plans(day_plans: list[DayPlan]) -> WorldPlan:
    """Merge reciprocated joint entries and order the day's work.

    Entries where two members name each other on the same task and activity
    join one group whose length is the longest of the merged entries.
    Unreciprocated joint entries fall back to solo work; a member's solo
    entries on one task collapse into one.
    """
    entries = [e for plan in day_plans for e in plan.entries]
    joint_index: dict[tuple[str, str, str], list] = {}
    for e in entries:
        if e.activity is not Activity.SOLO_WORK:
            joint_index.setdefault((e.member_id, e.task_id, e.activity.value), []).append(e)

    def names(a: str, b: str, task_id: str, activity: Activity) -> bool:
        return any(b in e.partners for e in joint_index.get((a, task_id, activity.value), ()))

    parent: dict[tuple, tuple] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    solo: dict[tuple[str, str], float] = {}
    joint_hours: dict[tuple, float] = {}
    for e in entries:
        if e.activity is Activity.SOLO_WORK:
            solo[(e.task_id, e.member_id)] = solo.get((e.task_id, e.member_id), 0.0) + e.hours
            continue
        mutual = [p for p in e.partners if names(p, e.member_id, e.task_id, e.activity)]
        if not mutual:
            solo[(e.task_id, e.member_id)] = solo.get((e.task_id, e.member_id), 0.0) + e.hours
            continue
        node = (e.task_id, e.activity.value, e.member_id)
        parent.setdefault(node, node)
        joint_hours[node] = max(joint_hours.get(node, 0.0), e.hours)
        for p in mutual:
            other = (e.task_id, e.activity.value, p)
            parent.setdefault(other, other)
            ra, rb = find(node), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    clusters: dict[tuple, list[tuple]] = {}
    for node in parent:
        clusters.setdefault(find(node), []).append(node)
    groups = [PlanGroup(task_id, Activity.SOLO_WORK, (m,), h) for (task_id, m), h in solo.items() if h > 0]
    for nodes in clusters.values():
        task_id, activity, _ = nodes[0]
        members = tuple(sorted(n[2] for n in nodes))
        groups.append(PlanGroup(task_id, Activity(activity), members, max(joint_hours[n] for n in nodes)))
    groups.sort(key=PlanGroup.sort_key)
    return WorldPlan(tuple(groups))


def execute_world_plan(state: RunState, wp: WorldPlan) -> RunState:
    """Apply one day's world plan in order, then step every member's stress.

    A group of k members working h hours costs each of them h hours of
    personal time but advances the task by h once, split evenly in the
    per-member progress ledger; progress stops at the task's workload.
    """
    tasks = {t.task_id: t for t in state.active_tasks}
    personal_hours = {m: 0.0 for m in state.members}
    decisions = {m: 0 for m in state.members}
    day_records: dict[tuple[str, str], WorkRecord] = {}

    def record(member_id: str, task_id: str) -> WorkRecord:
        key = (member_id, task_id)
        if key not in day_records:
            day_records[key] = WorkRecord(day=state.day, task_id=task_id, hours=0.0)
        return day_records[key]

    for group in wp.groups:
        task = tasks[group.task_id]
        credit = min(group.hours, task.remaining)
        share = credit / len(group.members)
        for m in group.members:
            if share > 0:
                task.hours_logged[m] = task.hours_logged.get(m, 0.0) + share
            personal_hours[m] += group.hours
            rec = record(m, group.task_id)
            rec.hours += group.hours
            rec.partners = sorted(set(rec.partners) | {p for p in group.members if p != m})
            rec.note = group.activity.value if not rec.note else rec.note
        if group.activity is Activity.TACTICAL_MEETING:
            for m in group.members:
                decisions[m] += 1
                record(m, group.task_id).decision_count += 1
        if group.is_joint:
            facilitator = task.holder(Role.FACILITATOR)
            decisions[facilitator] += 1
            record(facilitator, group.task_id).decision_count += 1
        kind = EventKind.MEETING_HELD if group.activity is Activity.TACTICAL_MEETING else EventKind.WORK_EXECUTED
        state.emit(kind, {**group.to_dict(), "credited": credit})

    for (m, _), rec in sorted(day_records.items()):
        state.members[m].work_records.append(rec)
    by_id = state.profile_by_id
    for m in sorted(state.members):
        ms = state.members[m]
        ms.stress = dynamics.stress_step(ms, personal_hours[m], decisions[m], by_id[m], state.config.dynamics)
        state.emit(
            EventKind.STRESS_UPDATED,
            {"member_id": m, "hours": personal_hours[m], "decisions": decisions[m], "stress": ms.stress},
        )
    return state


def run_day(state: RunState) -> RunState:
    if not (0 <= state.day < state.env.work_days_per_week):
        raise RuntimeError(f"day {state.day + 1} is outside the work week")
    state.day += 1
    contexts = [
        PlanContext(
            member=p,
            tasks=state.tasks_of(p.member_id),
            trust=state.trust,
            day=state.day,
            hours_per_day=state.env.hours_per_day,
            records=list(state.members[p.member_id].work_records),
            stress=state.members[p.member_id].stress,
            memory=state.members[p.member_id].memory_digest,
        )
        for p in state.profiles
    ]
    plans = state.brain.plan_all(contexts, state.rng["planning"])
    if len(plans) != len(contexts):
        raise BackendError(BackendErrorKind.SCHEMA_INVALID, "planner returned the wrong number of plans")
    for ctx, plan in zip(contexts, plans):
        _check_plan(state, plan, ctx.member.member_id)
    for plan in plans:
        state.emit(EventKind.PLAN_MADE, plan.to_dict())
    wp = consolidate_plans(plans)
    state.emit(EventKind.PLANS_CONSOLIDATED, wp.to_dict())
    return execute_world_plan(state, wp)


def _weekly_workload(tasks: list[TaskState]) -> dict[str, float]:
    load: dict[str, float] = {}
    for t in tasks:
        per_head = float(t.spec.workload_hours) / len(t.allocation)
        for m in t.allocation:
            load[m] = load.get(m, 0.0) + per_head
    return load


def run_evaluation(state: RunState) -> RunState:
    """Settle the week's tasks, score members, update trust and memory."""
    if state.week in state.evaluated_weeks:
        return state
    state.day = EVALUATION_DAY
    params = state.config.dynamics
    due = [t for t in state.active_tasks if t.spec.deadline_week <= state.week]
    for t in due:
        t.completion = dynamics.completion_ratio(t)
        t.per_member_credit = {m: t.completion for m in t.allocation}
        t.settled = True
        state.emit(
            EventKind.TASK_SETTLED,
            {
                "task_id": t.task_id,
                "workload_hours": encode_hours(t.spec.workload_hours),
                "allocation": list(t.allocation),
                "hours_logged": dict(sorted(t.hours_logged.items())),
                "completion": t.completion,
            },
        )
    for m in sorted(state.members):
        credits = [t.per_member_credit[m] for t in due if m in t.per_member_credit]
        value = dynamics.member_evaluation(credits)
        if value is not None:
            state.members[m].evaluation = value
        state.emit(
            EventKind.MEMBER_EVALUATED,
            {"member_id": m, "credits": credits, "evaluation": state.members[m].evaluation, "carried": value is None},
        )
    state.trust = dynamics.trust_update(state.trust, due, params)
    problems = state.trust.violations()
    if problems:
        raise RuntimeError(f"trust matrix invariant broken: {problems}")
    state.emit(EventKind.TRUST_UPDATED, {"task_ids": [t.task_id for t in due], "entries": state.trust.entries})
    for m in sorted(state.members):
        ms = state.members[m]
        ms.memory_digest = state.brain.summarize_cycle(ms.work_records, ms.evaluation)
        ms.work_records = []
        state.emit(EventKind.CYCLE_SUMMARIZED, {"member_id": m, "digest": ms.memory_digest.to_dict()})

    circles = {m: sum(1 for t in due if m in t.allocation) for m in state.members}
    workload = _weekly_workload(due)
    state.snapshots.append(
        {
            "week": state.week,
            "stress": {m: s.stress for m, s in sorted(state.members.items())},
            "evaluation": {m: s.evaluation for m, s in sorted(state.members.items())},
            "circles": dict(sorted(circles.items())),
            "workload": {m: workload.get(m, 0.0) for m in sorted(state.members)},
            "completion": {t.task_id: t.completion for t in due},
            "circle_sizes": {t.task_id: len(t.allocation) for t in due},
            "trust": state.trust.entries,
        }
    )
    state.active_tasks = [t for t in state.active_tasks if not t.settled]
    state.settled_tasks.extend(due)
    for m, ms in state.members.items():
        ms.assignment_count = len(state.tasks_of(m))
    state.evaluated_weeks.add(state.week)
    return state


def run_week(state: RunState) -> RunState:
    run_construction(state)
    for _ in range(state.env.work_days_per_week):
        run_day(state)
    run_evaluation(state)
    state.commit()
    return state


@dataclass
class RunArtifact:
    config: SimConfig
    events: list[EventLogEntry]
    snapshots: list[dict[str, Any]]
    profiles: list[MemberProfile]
    status: str = "complete"
    error: dict[str, Any] | None = None

    def events_jsonl(self) -> bytes:
        return "".join(e.to_json() + "\n" for e in self.events).encode("utf-8")

    def events_digest(self) -> str:
        return hashlib.sha256(self.events_jsonl()).hexdigest()

    def write(self, directory: str | Path) -> dict[str, str]:
        """Write config.json, events.jsonl and snapshots.json; return their sha256 digests."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {
            "config.json": (json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8"),
            "events.jsonl": self.events_jsonl(),
            "snapshots.json": (canonical_json({"status": self.status, "error": self.error, "weeks": self.snapshots}) + "\n").encode("utf-8"),
        }
        digests = {}
        for name, data in files.items():
            atomic_write(directory / name, data)
            digests[name] = hashlib.sha256(data).hexdigest()
        return digests

    @classmethod
    def load(cls, directory: str | Path) -> RunArtifact:
        directory = Path(directory)
        config = SimConfig.from_dict(json.loads((directory / "config.json").read_text("utf-8")))
        events = read_events(directory / "events.jsonl")
        snap = json.loads((directory / "snapshots.json").read_text("utf-8"))
        profiles = [MemberProfile.from_dict(e.payload["profile"]) for e in events if e.kind is EventKind.MEMBER_GENERATED]
        return cls(config, events, snap["weeks"], profiles, snap.get("status", "complete"), snap.get("error"))


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_events(path: str | Path) -> list[EventLogEntry]:
    with open(path, encoding="utf-8") as fh:
        return [EventLogEntry.from_dict(json.loads(line)) for line in fh if line.strip()]


def run_simulation(config: SimConfig, brain: Brain | None = None) -> RunArtifact:
    """Run ``config.weeks`` full weeks.

    An unrecoverable backend failure ends the run early; the artifact then
    keeps every fully committed week and carries an error marker.
    """
    try:
        state = init_state(config, brain)
    except BackendError as exc:
        log.warning("run aborted while generating members: %s", exc)
        error = {"kind": exc.kind.value, "message": str(exc), "week": 0, "day": 0}
        return RunArtifact(config, [], [], [], status="error", error=error)
    try:
        for _ in range(config.weeks):
            run_week(state)
    except BackendError as exc:
        log.warning("run aborted in week %d day %d: %s", state.week, state.day, exc)
        return RunArtifact(
            config,
            state.events[: state.committed],
            state.snapshots[: len(state.evaluated_weeks)],
            state.profiles,
            status="error",
            error={"kind": exc.kind.value, "message": str(exc), "week": state.week, "day": state.day},
        )
    return RunArtifact(config, list(state.events), list(state.snapshots), state.profiles)


def total_logged_hours(state: RunState) -> float:
    return math.fsum(t.total_logged for t in state.active_tasks + state.settled_tasks)
