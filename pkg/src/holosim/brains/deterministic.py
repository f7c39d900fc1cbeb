"""Seeded rule-based brain: the reference policy for tests and desk-scale runs."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from ..domain import (
    COMPETENCE_MAX,
    COMPETENCE_MIN,
    Activity,
    CompetenceSpec,
    DayPlan,
    MemberProfile,
    MemoryDigest,
    PlanEntry,
    Role,
    TaskSpec,
    TrustMatrix,
    WorkRecord,
    WorldEnvironment,
)
from .base import AllocationInfeasible, Brain, PlanContext, aggregate_records, check_bounds

FIRST_NAMES = (
    "Ada", "Bo", "Chen", "Dara", "Eli", "Farah", "Gus", "Hana", "Ivo", "Jun", "Kai", "Lena",
    "Mira", "Noor", "Omar", "Pia", "Quinn", "Rui", "Sana", "Teo", "Uma", "Vik", "Wen", "Yara", "Zed",
)
LAST_NAMES = (
    "Abe", "Berg", "Costa", "Diaz", "Eng", "Fox", "Gray", "Holm", "Ito", "Jain", "Kern", "Lund",
    "Moss", "Nagy", "Ortiz", "Park", "Qiu", "Rossi", "Sato", "Tan", "Ueda", "Voss", "Wu", "Xu", "Young",
)
PERSONALITIES = ("mild", "lively", "calm", "lazy", "meticulous", "outspoken", "reserved", "curious")
HABITS = (
    "takes a lunch break", "skips lunch", "likes to exercise", "works late",
    "starts early", "walks after lunch", "rarely exercises", "keeps a strict routine",
)
DIRECTIONS = (
    "recommendation systems", "natural language processing", "data engineering", "computer vision",
    "human resources analytics", "product design", "operations research", "information retrieval",
)
TASK_VERBS = ("Research and implement", "Design and evaluate", "Build and deploy", "Prototype and test")
TASK_OBJECTS = (
    "a new artificial intelligence algorithm",
    "a resume parsing service",
    "an interview scheduling assistant",
    "a candidate-job matching model",
    "a talent market dashboard",
    "a skills taxonomy",
)

TACTICAL_MEETING_DAY = 3
TACTICAL_MEETING_HOURS = 1.0
DISCUSSION_HOURS = 1.0
PLAN_UNIT = 0.5


def _clamped_normal(rng: np.random.Generator, mean: float, std: float) -> float:
    return float(min(COMPETENCE_MAX, max(COMPETENCE_MIN, rng.normal(mean, std))))


def split_hours(weights: list[float], caps: list[float], budget: float, unit: float = PLAN_UNIT) -> list[float]:
    """Split ``budget`` into ``unit`` steps proportionally to ``weights``.

    Largest-remainder rounding, ties to the earlier index; no share exceeds its
    cap and capacity freed by a cap is re-offered to the others.
    """
    n = len(weights)
    out = [0.0] * n
    units_left = int(math.floor(budget / unit + 1e-9))
    cap_units = [int(math.ceil(c / unit - 1e-9)) for c in caps]
    got = [0] * n
    open_idx = [i for i in range(n) if weights[i] > 0 and cap_units[i] > 0]
    while units_left > 0 and open_idx:
        total_w = math.fsum(weights[i] for i in open_idx)
        exact = {i: units_left * weights[i] / total_w for i in open_idx}
        share = {i: int(math.floor(exact[i] + 1e-9)) for i in open_idx}
        spare = units_left - sum(share.values())
        for i in sorted(open_idx, key=lambda i: (-(exact[i] - share[i]), i))[:spare]:
            share[i] += 1
        progressed = False
        for i in open_idx:
            take = min(share[i], cap_units[i] - got[i])
            if take > 0:
                got[i] += take
                units_left -= take
                progressed = True
        open_idx = [i for i in open_idx if got[i] < cap_units[i]]
        if not progressed:
            break
    for i in range(n):
        out[i] = got[i] * unit
    return out


class DeterministicBrain(Brain):
    """Rule-based policy; every decision is a pure function of its inputs."""

    name = "deterministic"

    def __init__(
        self,
        *,
        w_competence: float = 1.0,
        w_trust: float = 0.5,
        w_load: float = 1.0,
        vote_threshold: float = 0.3,
        hours_per_week: int = 40,
        staffing: str = "workload",
        jitter: float = 0.3,
        fatigue: float = 0.1,
    ):
        self.w_competence = w_competence
        self.w_trust = w_trust
        self.w_load = w_load
        self.vote_threshold = vote_threshold
        self.hours_per_week = hours_per_week
        self.staffing = staffing
        self.jitter = jitter
        self.fatigue = fatigue

    # construction

    def generate_members(self, env, n, competence: CompetenceSpec, rng):
        if n < 1:
            raise ValueError("an organization needs at least one member")
        width = max(2, len(str(n)))
        profiles = []
        for k in range(1, n + 1):
            mgmt = _clamped_normal(rng, competence.mgmt_mean, competence.mgmt_std)
            func = _clamped_normal(rng, competence.func_mean, competence.func_std)
            name = f"{FIRST_NAMES[rng.integers(len(FIRST_NAMES))]} {LAST_NAMES[rng.integers(len(LAST_NAMES))]}"
            profiles.append(
                MemberProfile(
                    member_id=f"m{k:0{width}d}",
                    name=name,
                    personality=PERSONALITIES[rng.integers(len(PERSONALITIES))],
                    life_habits=HABITS[rng.integers(len(HABITS))],
                    research_direction=DIRECTIONS[rng.integers(len(DIRECTIONS))],
                    management_competence=mgmt,
                    functional_competence=func,
                )
            )
        return profiles

    def generate_tasks(self, env: WorldEnvironment, n_members, m, rng, *, week=1, bounds=(2, 6)):
        if m < 1:
            raise ValueError("at least one task per round is required")
        workload = Fraction(n_members * env.hours_per_week, m)
        lo, hi = bounds
        tasks = []
        for k in range(1, m + 1):
            verb = TASK_VERBS[rng.integers(len(TASK_VERBS))]
            obj = TASK_OBJECTS[rng.integers(len(TASK_OBJECTS))]
            tasks.append(
                TaskSpec(
                    task_id=f"w{week:02d}-t{k:02d}",
                    title=f"{verb} {obj}",
                    description=f"{verb} {obj} for the {env.industry} goals of {env.org_name}.",
                    workload_hours=workload,
                    deadline_week=week,
                    min_members=lo,
                    max_members=hi,
                )
            )
        return tasks

    def candidate_score(self, profile: MemberProfile, trust: TrustMatrix, picks: list[str], load: int) -> float:
        return (
            self.w_competence * profile.competence_mean
            + self.w_trust * trust.mean_to(profile.member_id, picks)
            - self.w_load * load
        )

    def target_size(self, task: TaskSpec) -> int:
        """Circle size that covers the workload at full weekly capacity."""
        if self.staffing == "max":
            return task.max_members
        needed = math.ceil(task.workload_hours / self.hours_per_week)
        return min(task.max_members, max(task.min_members, needed))

    def allocate_members(self, task, profiles, trust, assignment_counts, rng=None):
        check_bounds(task, len(profiles))
        if task.max_members < task.min_members:
            raise AllocationInfeasible(f"task {task.task_id} has empty member bounds")
        by_id = {p.member_id: p for p in profiles}
        remaining = sorted(by_id)
        if rng is not None and self.jitter > 0:
            noise = dict(zip(remaining, rng.normal(0.0, self.jitter, len(remaining))))
        else:
            noise = dict.fromkeys(remaining, 0.0)
        picks: list[str] = []
        target = self.target_size(task)
        while len(picks) < target:
            scored = [
                (-self.candidate_score(by_id[m], trust, picks, assignment_counts.get(m, 0)) - noise[m], m)
                for m in remaining
            ]
            _, best = min(scored)
            picks.append(best)
            remaining.remove(best)
        return picks

    def adjust_circle(self, task, trust, allocation):
        if len(allocation) <= task.min_members:
            return list(allocation)
        dropped = []
        for member in allocation:
            voters = [v for v in allocation if v != member]
            drop_votes = sum(1 for v in voters if trust.get(v, member) < self.vote_threshold)
            if drop_votes * 2 > len(voters):
                dropped.append(member)
        if not dropped or len(allocation) - len(dropped) < task.min_members:
            return list(allocation)
        return [m for m in allocation if m not in dropped]

    def assign_roles(self, task, allocation, profiles):
        by_id = {p.member_id: p for p in profiles}
        members = sorted(allocation)
        if len(members) == 1:
            return {members[0]: [Role.FACILITATOR, Role.SECRETARY]}
        facilitator = min(members, key=lambda m: (-by_id[m].management_competence, m))
        rest = [m for m in members if m != facilitator]
        secretary = min(rest, key=lambda m: (-by_id[m].functional_competence, m))
        roles = {m: [Role.MEMBER] for m in members}
        roles[facilitator] = [Role.FACILITATOR]
        roles[secretary] = [Role.SECRETARY]
        return roles

    # execution

    def day_budget(self, hours_per_day: int, stress: float) -> float:
        """Hours a member is willing to plan: full days when calm, fewer under stress."""
        raw = hours_per_day / (1.0 + self.fatigue * stress)
        return math.floor(raw / PLAN_UNIT + 1e-9) * PLAN_UNIT

    def plan_day(self, ctx: PlanContext, rng=None) -> DayPlan:
        me = ctx.member.member_id
        tasks = sorted((t for t in ctx.tasks if t.remaining > 0), key=lambda t: t.task_id)
        if not tasks:
            return DayPlan(me)
        entries: list[PlanEntry] = []
        budget = self.day_budget(ctx.hours_per_day, ctx.stress)
        if ctx.day == TACTICAL_MEETING_DAY:
            for t in tasks:
                others = tuple(m for m in t.allocation if m != me)
                if others and budget >= TACTICAL_MEETING_HOURS:
                    entries.append(PlanEntry(me, t.task_id, TACTICAL_MEETING_HOURS, others, Activity.TACTICAL_MEETING))
                    budget -= TACTICAL_MEETING_HOURS
        hours = split_hours([t.remaining for t in tasks], [t.remaining for t in tasks], budget)
        work = [(t, h) for t, h in zip(tasks, hours) if h > 0]
        shared = [(t, h) for t, h in work if len(t.allocation) >= 2 and h >= DISCUSSION_HOURS]
        talk_task = None
        if shared:
            talk_task, _ = min(shared, key=lambda th: (-th[1], th[0].task_id))
        for t, h in work:
            if t is talk_task:
                others = [m for m in t.allocation if m != me]
                partner = min(others, key=lambda m: (-ctx.trust.get(me, m), m))
                entries.append(PlanEntry(me, t.task_id, DISCUSSION_HOURS, (partner,), Activity.DISCUSSION))
                h -= DISCUSSION_HOURS
            if h > 0:
                entries.append(PlanEntry(me, t.task_id, h))
        return DayPlan(me, tuple(entries))

    def summarize_cycle(self, records: list[WorkRecord], evaluation: float | None = None) -> MemoryDigest:
        if not records and evaluation is None:
            return MemoryDigest()
        totals, partners = aggregate_records(records)
        parts = [f"{task_id}: {hours:g}h" for task_id, hours in totals.items()]
        text = "; ".join(parts) if parts else "no work recorded"
        if partners:
            text += " | partners " + ", ".join(f"{p}x{c}" for p, c in partners.items())
        if evaluation is not None:
            text += f" | evaluation {evaluation:.3f}"
        return MemoryDigest(text=text, task_hours=totals, partner_counts=partners, last_evaluation=evaluation)
