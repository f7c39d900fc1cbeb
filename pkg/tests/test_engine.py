from __future__ import annotations

import json
import math
from fractions import Fraction

import pytest

from holosim.brains import BackendError, BackendErrorKind, DeterministicBrain
from holosim.domain import (
    Activity,
    DayPlan,
    EventKind,
    InvalidConfig,
    PlanEntry,
    PlanGroup,
    Role,
    SimConfig,
    TaskSpec,
    TaskState,
    WorldPlan,
    decode_hours,
)
from holosim.engine import (
    RunArtifact,
    consolidate_plans,
    execute_world_plan,
    init_state,
    read_events,
    run_construction,
    run_day,
    run_evaluation,
    run_simulation,
    run_week,
    total_logged_hours,
)
from holosim.rng import make_stream, make_streams


def small(**kw):
    base = dict(seed=3, n_members=6, tasks_per_week=2, weeks=2)
    base.update(kw)
    return SimConfig(**base)


def events_of(state_or_artifact, kind):
    return [e for e in state_or_artifact.events if e.kind is kind]


def manual_task(state, task_id, members, workload=200, facilitator=None):
    spec = TaskSpec(task_id, "x", "y", workload, state.week or 1, 1, 6)
    facilitator = facilitator or members[0]
    roles = {m: [Role.MEMBER] for m in members}
    roles[facilitator] = [Role.FACILITATOR] if len(members) > 1 else [Role.FACILITATOR, Role.SECRETARY]
    if len(members) > 1:
        roles[next(m for m in members if m != facilitator)] = [Role.SECRETARY]
    t = TaskState(spec, allocation=list(members), roles=roles)
    state.active_tasks.append(t)
    return t


class TestConstruction:
    def test_week_one(self):
        state = run_construction(init_state(SimConfig(seed=1)))
        assert len(state.active_tasks) == 4
        assert sum(t.spec.workload_hours for t in state.active_tasks) == 800
        kinds = [e.kind for e in state.events if e.week == 1]
        for k in (EventKind.TASK_ISSUED, EventKind.ALLOCATED, EventKind.CIRCLE_ADJUSTED, EventKind.ROLES_ASSIGNED):
            assert kinds.count(k) == 4

    def test_assignment_counts_match_circles(self):
        state = run_construction(init_state(SimConfig(seed=2)))
        for m, s in state.members.items():
            assert s.assignment_count == sum(1 for t in state.active_tasks if m in t.allocation)

    def test_empty_organization(self):
        with pytest.raises(InvalidConfig):
            init_state(SimConfig(n_members=0))
        state = init_state(small())
        state.members.clear()
        before = len(state.events)
        with pytest.raises(InvalidConfig):
            run_construction(state)
        assert len(state.events) == before

    def test_roles_valid(self):
        state = run_construction(init_state(SimConfig(seed=4)))
        for t in state.active_tasks:
            assert t.holder(Role.FACILITATOR) != t.holder(Role.SECRETARY)


class TestConsolidate:
    def test_mutual_discussion_merges(self):
        a = DayPlan("a", (PlanEntry("a", "t1", 2.0, ("b",), Activity.DISCUSSION),))
        b = DayPlan("b", (PlanEntry("b", "t1", 2.0, ("a",), Activity.DISCUSSION),))
        wp = consolidate_plans([a, b])
        assert wp.groups == (PlanGroup("t1", Activity.DISCUSSION, ("a", "b"), 2.0),)

    def test_pairing_oracle(self):
        # every ordered pair of plans checked for reciprocity by hand
        plans = [
            DayPlan("a", (PlanEntry("a", "t1", 1.0, ("b", "c"), Activity.DISCUSSION), PlanEntry("a", "t1", 3.0))),
            DayPlan("b", (PlanEntry("b", "t1", 2.0, ("a",), Activity.DISCUSSION),)),
            DayPlan("c", (PlanEntry("c", "t1", 1.5, ("d",), Activity.DISCUSSION),)),
            DayPlan("d", (PlanEntry("d", "t2", 1.0, ("c",), Activity.DISCUSSION),)),
        ]
        mutual = set()
        for p, q in [(p, q) for p in plans for q in plans if p is not q]:
            for e in p.entries:
                for f in q.entries:
                    if (e.activity is f.activity is Activity.DISCUSSION and e.task_id == f.task_id
                            and q.member_id in e.partners and p.member_id in f.partners):
                        mutual.add(frozenset((p.member_id, q.member_id)))
        assert mutual == {frozenset("ab")}
        wp = consolidate_plans(plans)
        assert PlanGroup("t1", Activity.DISCUSSION, ("a", "b"), 2.0) in wp.groups
        assert PlanGroup("t1", Activity.SOLO_WORK, ("c",), 1.5) in wp.groups
        assert PlanGroup("t2", Activity.SOLO_WORK, ("d",), 1.0) in wp.groups
        assert PlanGroup("t1", Activity.SOLO_WORK, ("a",), 3.0) in wp.groups

    def test_identity_merge_order(self):
        plans = [DayPlan("b", (PlanEntry("b", "t2", 3.0), PlanEntry("b", "t1", 1.0))), DayPlan("a", (PlanEntry("a", "t1", 4.0),))]
        wp = consolidate_plans(plans)
        assert [(g.task_id, g.members) for g in wp.groups] == [("t1", ("a",)), ("t1", ("b",)), ("t2", ("b",))]
        assert consolidate_plans(list(reversed(plans))) == wp

    def test_unreciprocated_falls_back_to_solo(self):
        a = DayPlan("a", (PlanEntry("a", "t1", 2.0, ("b",), Activity.DISCUSSION),))
        b = DayPlan("b", (PlanEntry("b", "t1", 2.0),))
        wp = consolidate_plans([a, b])
        assert wp.groups == (PlanGroup("t1", Activity.SOLO_WORK, ("a",), 2.0), PlanGroup("t1", Activity.SOLO_WORK, ("b",), 2.0))

    def test_tactical_meeting_transitive(self):
        plans = [DayPlan(m, (PlanEntry(m, "t1", 1.0, tuple(x for x in "abc" if x != m), Activity.TACTICAL_MEETING),)) for m in "abc"]
        (g,) = consolidate_plans(plans).groups
        assert g.members == ("a", "b", "c") and g.activity is Activity.TACTICAL_MEETING

    def test_no_duplicates_under_merge_relation(self):
        state = run_construction(init_state(SimConfig(seed=5)))
        state.day = 2
        run_day(state)
        (wp,) = [e.payload for e in events_of(state, EventKind.PLANS_CONSOLIDATED)]
        keys = [(g["task_id"], g["activity"], tuple(g["members"])) for g in wp["groups"]]
        assert len(keys) == len(set(keys))
        seen = set()
        for task_id, activity, members in keys:
            for m in members:
                assert (task_id, activity, m) not in seen
                seen.add((task_id, activity, m))


class TestExecute:
    def test_solo_accounting(self):
        state = init_state(small())
        t = manual_task(state, "t1", ["m01", "m02"])
        execute_world_plan(state, WorldPlan((PlanGroup("t1", Activity.SOLO_WORK, ("m01",), 6.0),)))
        assert t.hours_logged == {"m01": 6.0}

    def test_joint_session_credited_once(self):
        state = init_state(small())
        t = manual_task(state, "t1", ["m01", "m02"])
        execute_world_plan(state, WorldPlan((PlanGroup("t1", Activity.DISCUSSION, ("m01", "m02"), 2.0),)))
        assert t.total_logged == 2.0
        (ev_a, ev_b) = [e.payload for e in events_of(state, EventKind.STRESS_UPDATED) if e.payload["member_id"] in ("m01", "m02")]
        assert ev_a["hours"] == ev_b["hours"] == 2.0

    def test_facilitator_decisions(self):
        state = init_state(small())
        manual_task(state, "t1", ["m01", "m02", "m03"], facilitator="m01")
        groups = tuple(
            PlanGroup("t1", Activity.DISCUSSION, ms, 1.0) for ms in [("m01", "m02"), ("m02", "m03"), ("m01", "m03")]
        )
        execute_world_plan(state, WorldPlan(groups))
        by = {e.payload["member_id"]: e.payload for e in events_of(state, EventKind.STRESS_UPDATED)}
        assert by["m01"]["decisions"] == 3 and by["m02"]["decisions"] == 0

    def test_tactical_meeting_decisions(self):
        state = init_state(small())
        manual_task(state, "t1", ["m01", "m02", "m03"], facilitator="m01")
        execute_world_plan(state, WorldPlan((PlanGroup("t1", Activity.TACTICAL_MEETING, ("m01", "m02", "m03"), 1.0),)))
        by = {e.payload["member_id"]: e.payload["decisions"] for e in events_of(state, EventKind.STRESS_UPDATED)}
        assert by["m01"] == 2 and by["m02"] == by["m03"] == 1
        assert len(events_of(state, EventKind.MEETING_HELD)) == 1

    def test_progress_is_capped_and_monotone(self):
        state = init_state(small())
        t = manual_task(state, "t1", ["m01", "m02"], workload=10)
        progress = []
        for _ in range(4):
            execute_world_plan(state, WorldPlan((PlanGroup("t1", Activity.SOLO_WORK, ("m01",), 4.0),)))
            progress.append(t.total_logged)
        assert progress == sorted(progress) and progress[-1] == 10.0

    def test_idle_member_recovers(self):
        state = init_state(small())
        state.members["m03"].stress = 2.0
        execute_world_plan(state, WorldPlan(()))
        assert state.members["m03"].stress == pytest.approx(1.8)


class TestDay:
    def test_idle_member_has_no_work_events(self):
        state = init_state(small(n_members=6, tasks_per_week=1, max_members=2, min_members=2))
        run_construction(state)
        idle = [m for m in state.members if not state.tasks_of(m)]
        assert idle
        run_day(state)
        worked = {m for e in events_of(state, EventKind.WORK_EXECUTED) for m in e.payload["members"]}
        assert not worked & set(idle)

    def test_hours_conserved(self):
        state = init_state(SimConfig(seed=8))
        run_construction(state)
        run_day(state)
        per_member = {}
        for e in events_of(state, EventKind.PLAN_MADE):
            per_member[e.payload["member_id"]] = math.fsum(x["hours"] for x in e.payload["entries"])
        stressed = {e.payload["member_id"]: e.payload["hours"] for e in events_of(state, EventKind.STRESS_UPDATED)}
        # a calm member's full day is 8 planned and 8 personal hours
        assert all(v == 8.0 for m, v in per_member.items() if v > 0)
        for m, h in per_member.items():
            assert stressed[m] == pytest.approx(h)

    def test_week_total_bounded(self):
        state = init_state(SimConfig(seed=8))
        run_construction(state)
        for _ in range(5):
            run_day(state)
        from_log = math.fsum(e.payload["credited"] for e in state.events if e.kind in (EventKind.WORK_EXECUTED, EventKind.MEETING_HELD))
        assert from_log == pytest.approx(total_logged_hours(state), abs=1e-9)
        assert from_log <= 20 * 40

    def test_sixth_day_rejected(self):
        state = init_state(small())
        run_construction(state)
        for _ in range(5):
            run_day(state)
        with pytest.raises(RuntimeError):
            run_day(state)


class TestEvaluation:
    def test_exact_completion(self):
        state = init_state(small())
        state.week = 1
        t = manual_task(state, "t1", ["m01", "m02"])
        t.hours_logged = {"m01": 120.0, "m02": 80.0}
        run_evaluation(state)
        assert t.completion == 1.0 and t.settled

    def test_mean_of_credits(self):
        state = init_state(small())
        state.week = 1
        a = manual_task(state, "t1", ["m01", "m02"], workload=100)
        b = manual_task(state, "t2", ["m01", "m03"], workload=100)
        a.hours_logged = {"m01": 50.0}
        b.hours_logged = {"m03": 100.0}
        run_evaluation(state)
        assert state.members["m01"].evaluation == 0.75

    def test_carry_forward(self):
        state = init_state(small())
        state.week = 1
        manual_task(state, "t1", ["m01", "m02"], workload=100).hours_logged = {"m01": 100.0}
        run_evaluation(state)
        assert state.members["m05"].evaluation == 0.5
        state.members["m05"].evaluation = 0.9
        state.week = 2
        run_evaluation(state)
        assert state.members["m05"].evaluation == 0.9

    def test_idempotent(self):
        state = init_state(small())
        run_construction(state)
        for _ in range(5):
            run_day(state)
        run_evaluation(state)
        snapshot = (len(state.events), state.trust.entries, {m: s.evaluation for m, s in state.members.items()})
        run_evaluation(state)
        assert snapshot == (len(state.events), state.trust.entries, {m: s.evaluation for m, s in state.members.items()})

    def test_records_replaced_by_digest(self):
        state = init_state(small())
        run_week(state)
        for s in state.members.values():
            assert s.work_records == []
        assert len(events_of(state, EventKind.CYCLE_SUMMARIZED)) == 6


class TestSimulation:
    def test_thirty_two_tasks(self, default_run):
        assert len(events_of(default_run, EventKind.TASK_ISSUED)) == 32

    def test_deterministic(self, default_run):
        assert run_simulation(SimConfig(seed=42)).events_jsonl() == default_run.events_jsonl()

    def test_seed_matters(self, default_run):
        assert run_simulation(SimConfig(seed=43)).events_digest() != default_run.events_digest()

    def test_zero_weeks(self):
        art = run_simulation(small(weeks=0))
        assert {e.kind for e in art.events} == {EventKind.MEMBER_GENERATED} and art.snapshots == []

    def test_event_order(self, default_run):
        keys = [e.order_key() for e in default_run.events]
        assert all(a < b for a, b in zip(keys, keys[1:]))

    def test_member_ids_resolve(self, default_run):
        known = {p.member_id for p in default_run.profiles}
        for e in default_run.events:
            p = e.payload
            if "member_id" in p and e.kind is not EventKind.MEMBER_GENERATED:
                assert p["member_id"] in known
            for key in ("allocation", "members", "dropped"):
                assert set(p.get(key, ())) <= known
            if "roles" in p:
                assert set(p["roles"]) <= known

    def test_weekly_balance_and_ranges(self, default_run):
        issued = {}
        for e in events_of(default_run, EventKind.TASK_ISSUED):
            issued.setdefault(e.week, []).append(decode_hours(e.payload["task"]["workload_hours"]))
        assert all(sum(v, Fraction(0)) == 20 * 8 * 5 for v in issued.values()) and len(issued) == 8
        for s in default_run.snapshots:
            assert all(0.0 <= c <= 1.0 for c in s["completion"].values())
            assert all(0.0 <= d <= 1.0 for d in s["evaluation"].values())
            assert all(v >= 0 for v in s["stress"].values())

    def test_trust_invariants_every_week(self, default_run):
        from holosim.domain import TrustMatrix

        ids = [p.member_id for p in default_run.profiles]
        for e in events_of(default_run, EventKind.TRUST_UPDATED):
            assert TrustMatrix(ids, e.payload["entries"]).violations() == []

    def test_hour_conservation(self, default_run):
        per_day = {}
        for e in events_of(default_run, EventKind.STRESS_UPDATED):
            assert e.payload["hours"] <= 8.0
            per_day[(e.week, e.day)] = per_day.get((e.week, e.day), 0.0) + e.payload["hours"]
        assert len(per_day) == 8 * 5 and max(per_day.values()) <= 20 * 8.0
        logged = math.fsum(math.fsum(e.payload["hours_logged"].values()) for e in events_of(default_run, EventKind.TASK_SETTLED))
        assert logged <= 20 * 8 * 5 * 8

    def test_artifact_round_trip(self, default_run, tmp_path):
        digests = default_run.write(tmp_path / "run")
        loaded = RunArtifact.load(tmp_path / "run")
        assert loaded.events_jsonl() == default_run.events_jsonl()
        assert loaded.snapshots == json.loads(json.dumps(default_run.snapshots))
        assert loaded.profiles == default_run.profiles and loaded.config == default_run.config
        assert set(digests) == {"config.json", "events.jsonl", "snapshots.json"}
        assert read_events(tmp_path / "run" / "events.jsonl") == default_run.events


class FailingBrain(DeterministicBrain):
    def __init__(self, fail_week, fail_day=2):
        super().__init__()
        self.fail_week, self.fail_day, self.calls = fail_week, fail_day, 0
        self.week = 0

    def generate_tasks(self, *args, week=1, **kw):
        self.week = week
        return super().generate_tasks(*args, week=week, **kw)

    def plan_all(self, contexts, rng=None):
        if self.week == self.fail_week and contexts[0].day == self.fail_day:
            raise BackendError(BackendErrorKind.RETRIES_EXHAUSTED, "endpoint down")
        return super().plan_all(contexts, rng)


def test_backend_failure_leaves_partial_artifact(tmp_path):
    cfg = small(weeks=4)
    art = run_simulation(cfg, FailingBrain(fail_week=3))
    assert art.status == "error"
    assert art.error["kind"] == "RetriesExhausted" and art.error["week"] == 3
    assert max(e.week for e in art.events) == 2 and len(art.snapshots) == 2
    full = run_simulation(cfg)
    # the committed weeks agree byte for byte with an undisturbed run
    prefix = full.events_jsonl()[: len(art.events_jsonl())]
    assert prefix == art.events_jsonl()
    art.write(tmp_path)
    snap = json.loads((tmp_path / "snapshots.json").read_text())
    assert snap["status"] == "error" and snap["error"]["week"] == 3


def test_rng_streams_independent():
    a = make_streams(7)
    a["tasks"].random(1000)
    b = make_streams(7)
    assert a["allocation"].random() == b["allocation"].random()
    assert make_stream(7, "planning").random() != make_stream(7, "dynamics").random()
