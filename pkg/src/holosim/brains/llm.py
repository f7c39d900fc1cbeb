"""Remote chat-completion backend.

Each decision is one structured JSON exchange: a prompt rendered from
``prompts/{decision_kind}.txt``, a reply validated against a JSON schema plus
decision-specific checks, one repair round for a bad reply, and backed-off
retries for transient failures.
"""
from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from string import Template
from typing import Any

import httpx
import jsonschema
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
    canonical_json,
)
from .base import (
    BackendError,
    BackendErrorKind,
    Brain,
    BrainRequest,
    BrainResponse,
    DecisionKind,
    PlanContext,
    aggregate_records,
    check_bounds,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "HOLOSIM_API_KEY"
RETRYABLE_STATUS = frozenset({408, 409, 425, 429})


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gpt-4o-mini"
    api_key: str | None = field(default=None, repr=False)
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrent_requests: int = 4
    temperature: float = 0.7
    backoff_base: float = 0.5
    backoff_cap: float = 30.0

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")

    @classmethod
    def from_env(cls, **overrides: Any) -> LlmEndpointConfig:
        overrides.setdefault("api_key", os.environ.get(API_KEY_ENV))
        return cls(**overrides)

    def backoff(self, retry: int) -> float:
        """Delay before retry number ``retry`` (1-based)."""
        return min(self.backoff_cap, self.backoff_base * 2 ** (retry - 1))

    def to_dict(self) -> dict[str, Any]:
        # the key never leaves the process
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "max_concurrent_requests": self.max_concurrent_requests,
            "temperature": self.temperature,
            "backoff_base": self.backoff_base,
            "backoff_cap": self.backoff_cap,
        }


# reply schemas

_ID = {"type": "string", "minLength": 1}
_TEXT = {"type": "string", "minLength": 1}

SCHEMAS: dict[DecisionKind, dict[str, Any]] = {
    DecisionKind.GENERATE_MEMBERS: {
        "type": "object",
        "required": ["members"],
        "properties": {
            "members": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["name", "personality", "life_habits", "research_direction"],
                    "properties": {
                        "name": _TEXT,
                        "personality": _TEXT,
                        "life_habits": _TEXT,
                        "research_direction": _TEXT,
                    },
                },
            }
        },
    },
    DecisionKind.GENERATE_TASKS: {
        "type": "object",
        "required": ["tasks"],
        "properties": {
            "tasks": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["title", "description"],
                    "properties": {"title": _TEXT, "description": _TEXT},
                },
            }
        },
    },
    DecisionKind.ALLOCATE_MEMBERS: {
        "type": "object",
        "required": ["members"],
        "properties": {"members": {"type": "array", "items": _ID, "uniqueItems": True}},
    },
    DecisionKind.ADJUST_CIRCLE: {
        "type": "object",
        "required": ["votes"],
        "properties": {
            "votes": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["voter", "member", "vote"],
                    "properties": {"voter": _ID, "member": _ID, "vote": {"enum": ["keep", "drop"]}},
                },
            }
        },
    },
    DecisionKind.ASSIGN_ROLES: {
        "type": "object",
        "required": ["facilitator", "secretary"],
        "properties": {"facilitator": _ID, "secretary": _ID},
    },
    DecisionKind.PLAN_DAY: {
        "type": "object",
        "required": ["entries"],
        "properties": {
            "entries": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["task_id", "hours", "activity"],
                    "properties": {
                        "task_id": _ID,
                        "hours": {"type": "number", "exclusiveMinimum": 0},
                        "partners": {"type": "array", "items": _ID, "uniqueItems": True},
                        "activity": {"enum": [a.value for a in Activity]},
                    },
                },
            }
        },
    },
    DecisionKind.SUMMARIZE_CYCLE: {
        "type": "object",
        "required": ["text"],
        "properties": {"text": _TEXT},
    },
}


# semantic checks: each returns a list of human-readable problems


def _check_members(data: dict, ctx: dict) -> list[str]:
    got = len(data["members"])
    return [] if got == ctx["n"] else [f"expected exactly {ctx['n']} members, got {got}"]


def _check_tasks(data: dict, ctx: dict) -> list[str]:
    got = len(data["tasks"])
    return [] if got == ctx["m"] else [f"expected exactly {ctx['m']} tasks, got {got}"]


def _check_allocation(data: dict, ctx: dict) -> list[str]:
    picks = data["members"]
    errors = [f"unknown member id {m!r}" for m in picks if m not in ctx["candidate_ids"]]
    lo, hi = ctx["bounds"]
    if not (lo <= len(picks) <= hi):
        errors.append(f"circle size {len(picks)} outside [{lo}, {hi}]")
    return errors


def _check_votes(data: dict, ctx: dict) -> list[str]:
    circle = set(ctx["allocation"])
    errors = []
    for v in data["votes"]:
        if v["voter"] not in circle or v["member"] not in circle:
            errors.append(f"vote {v['voter']}->{v['member']} names someone outside the circle")
        elif v["voter"] == v["member"]:
            errors.append(f"{v['voter']} voted on themself")
    return errors


def _check_roles(data: dict, ctx: dict) -> list[str]:
    circle = set(ctx["allocation"])
    errors = [f"{data[k]!r} is not in the circle" for k in ("facilitator", "secretary") if data[k] not in circle]
    if len(circle) > 1 and data["facilitator"] == data["secretary"]:
        errors.append("facilitator and secretary must differ")
    return errors


def _check_plan(data: dict, ctx: dict) -> list[str]:
    circles: dict[str, list[str]] = ctx["circles"]
    me = ctx["member_id"]
    errors = []
    total = 0.0
    for e in data["entries"]:
        total += e["hours"]
        if e["task_id"] not in circles:
            errors.append(f"{e['task_id']!r} is not one of your tasks")
            continue
        partners = e.get("partners", [])
        if me in partners:
            errors.append("you cannot list yourself as a partner")
        outside = [p for p in partners if p not in circles[e["task_id"]]]
        if outside:
            errors.append(f"partners {outside} are not in the circle of {e['task_id']}")
        if e["activity"] != Activity.SOLO_WORK.value and not partners:
            errors.append(f"{e['activity']} on {e['task_id']} needs at least one partner")
    if total > ctx["hours_per_day"] + 1e-9:
        errors.append(f"planned {total:g}h exceeds the {ctx['hours_per_day']}h day")
    return errors


def _check_summary(data: dict, ctx: dict) -> list[str]:
    return [f"summary omits task {t}" for t in ctx["task_hours"] if t not in data["text"]]


SEMANTIC_CHECKS: dict[DecisionKind, Callable[[dict, dict], list[str]]] = {
    DecisionKind.GENERATE_MEMBERS: _check_members,
    DecisionKind.GENERATE_TASKS: _check_tasks,
    DecisionKind.ALLOCATE_MEMBERS: _check_allocation,
    DecisionKind.ADJUST_CIRCLE: _check_votes,
    DecisionKind.ASSIGN_ROLES: _check_roles,
    DecisionKind.PLAN_DAY: _check_plan,
    DecisionKind.SUMMARIZE_CYCLE: _check_summary,
}


def validate_reply(kind: DecisionKind, data: Any, context: dict[str, Any]) -> list[str]:
    """Schema errors first; semantic checks only run on schema-valid data."""
    validator = jsonschema.Draft202012Validator(SCHEMAS[kind])
    errors = [
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    ]
    if errors:
        return errors
    return SEMANTIC_CHECKS[kind](data, context)


# prompts


def load_template(name: str) -> Template:
    text = resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render_messages(request: BrainRequest) -> list[dict[str, str]]:
    """System + user messages for a request; context values are pre-rendered strings."""
    fields = {k: v if isinstance(v, str) else canonical_json(v) for k, v in request.context.get("prompt", {}).items()}
    fields["schema"] = canonical_json(SCHEMAS[request.kind])
    user = load_template(request.kind.value).substitute(fields)
    return [
        {"role": "system", "content": load_template("_system").template.strip()},
        {"role": "user", "content": user},
    ]


# transport


class _Retryable(Exception):
    def __init__(self, error: BackendError):
        super().__init__(str(error))
        self.error = error


def _post(client: httpx.Client, cfg: LlmEndpointConfig, messages: list[dict[str, str]]) -> str:
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    body = {"model": cfg.model_name, "messages": messages, "temperature": cfg.temperature}
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    try:
        resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
    except httpx.TimeoutException as exc:
        raise _Retryable(BackendError(BackendErrorKind.TIMEOUT, f"no reply within {cfg.timeout}s: {exc}")) from exc
    except httpx.TransportError as exc:
        raise _Retryable(BackendError(BackendErrorKind.HTTP_STATUS, f"transport failure: {exc}")) from exc
    if resp.status_code >= 500 or resp.status_code in RETRYABLE_STATUS:
        raise _Retryable(BackendError(BackendErrorKind.HTTP_STATUS, f"server answered {resp.status_code}"))
    if resp.status_code >= 400:
        raise BackendError(BackendErrorKind.HTTP_STATUS, f"request rejected with {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise _Retryable(BackendError(BackendErrorKind.SCHEMA_INVALID, "reply is not a chat-completion envelope")) from exc


def _parse(content: Any) -> tuple[Any, list[str]]:
    if not isinstance(content, str):
        return None, ["message content is not a string"]
    try:
        data = json.loads(content)
    except json.JSONDecodeError as exc:
        return None, [f"reply is not valid JSON: {exc.msg} at position {exc.pos}"]
    if not isinstance(data, dict):
        return None, ["reply must be a single JSON object"]
    return data, []


def _repair_messages(messages: list[dict[str, str]], content: Any, errors: list[str]) -> list[dict[str, str]]:
    listing = "\n".join(f"- {e}" for e in errors)
    return messages + [
        {"role": "assistant", "content": content if isinstance(content, str) else json.dumps(content)},
        {
            "role": "user",
            "content": f"Your reply was rejected:\n{listing}\nAnswer again with only the corrected JSON object.",
        },
    ]


def complete_with_retry(
    request: BrainRequest,
    cfg: LlmEndpointConfig,
    *,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> BrainResponse:
    """Run one decision against the endpoint.

    The first schema-invalid reply gets exactly one repair round that shows
    the model its validation errors. Transient failures (timeouts, 5xx, 429,
    replies still invalid after the repair) are retried up to
    ``cfg.max_retries`` times with exponential backoff. Other 4xx answers fail
    at once.
    """
    own = client is None
    client = client or httpx.Client()
    messages = render_messages(request)
    context = request.context.get("check", {})
    repairs = 0
    calls = 0
    last: BackendError | None = None
    try:
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                sleep(cfg.backoff(attempt))
            try:
                calls += 1
                content = _post(client, cfg, messages)
                data, errors = _parse(content)
                if not errors:
                    errors = validate_reply(request.kind, data, context)
                if errors and repairs == 0:
                    repairs = 1
                    log.info("%s reply invalid, repairing: %s", request.kind.value, errors)
                    calls += 1
                    content = _post(client, cfg, _repair_messages(messages, content, errors))
                    data, errors = _parse(content)
                    if not errors:
                        errors = validate_reply(request.kind, data, context)
                if errors:
                    raise _Retryable(BackendError(BackendErrorKind.SCHEMA_INVALID, "; ".join(errors)))
                return BrainResponse(request.kind, data, repairs=repairs, attempts=attempt + 1)
            except _Retryable as exc:
                last = exc.error
                last.attempts = calls
                log.warning("%s attempt %d failed: %s", request.kind.value, attempt + 1, last)
    except BackendError as exc:
        exc.attempts = calls
        raise
    finally:
        if own:
            client.close()
    raise BackendError(
        BackendErrorKind.RETRIES_EXHAUSTED,
        f"{request.kind.value} failed after {cfg.max_retries + 1} attempts: {last}",
        cause=last,
        attempts=calls,
    )


# the brain


def _clamped_normal(rng: np.random.Generator, mean: float, std: float) -> float:
    return float(min(COMPETENCE_MAX, max(COMPETENCE_MIN, rng.normal(mean, std))))


def _trust_listing(trust: TrustMatrix, ids: list[str]) -> dict[str, float]:
    out = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            h = trust.get(a, b)
            if h != 0.5:
                out[f"{a}-{b}"] = round(h, 4)
    return out


class LlmBrain(Brain):
    """Every decision delegated to a chat-completion model.

    Numeric competences are still sampled from the run's seeded stream so the
    experimental design holds; the model supplies everything qualitative.
    Runs are not byte-reproducible under this brain.
    """

    name = "llm"

    def __init__(
        self,
        config: LlmEndpointConfig,
        *,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.client = client or httpx.Client()
        self.sleep = sleep

    def ask(self, kind: DecisionKind, prompt: dict[str, Any], check: dict[str, Any]) -> dict[str, Any]:
        request = BrainRequest(kind, {"prompt": prompt, "check": check})
        return complete_with_retry(request, self.config, client=self.client, sleep=self.sleep).data

    def generate_members(self, env: WorldEnvironment, n: int, competence: CompetenceSpec, rng):
        if n < 1:
            raise ValueError("an organization needs at least one member")
        comps = [
            (
                _clamped_normal(rng, competence.mgmt_mean, competence.mgmt_std),
                _clamped_normal(rng, competence.func_mean, competence.func_std),
            )
            for _ in range(n)
        ]
        data = self.ask(
            DecisionKind.GENERATE_MEMBERS,
            {
                "n": str(n),
                "environment": env.to_dict(),
                "competences": [{"management": round(m, 2), "functional": round(f, 2)} for m, f in comps],
            },
            {"n": n},
        )
        width = max(2, len(str(n)))
        return [
            MemberProfile(
                member_id=f"m{k:0{width}d}",
                name=row["name"],
                personality=row["personality"],
                life_habits=row["life_habits"],
                research_direction=row["research_direction"],
                management_competence=mgmt,
                functional_competence=func,
            )
            for k, (row, (mgmt, func)) in enumerate(zip(data["members"], comps), start=1)
        ]

    def generate_tasks(self, env, n_members, m, rng, *, week=1, bounds=(2, 6)):
        if m < 1:
            raise ValueError("at least one task per round is required")
        workload = Fraction(n_members * env.hours_per_week, m)
        data = self.ask(
            DecisionKind.GENERATE_TASKS,
            {"m": str(m), "week": str(week), "workload": str(workload), "environment": env.to_dict()},
            {"m": m},
        )
        lo, hi = bounds
        return [
            TaskSpec(f"w{week:02d}-t{k:02d}", row["title"], row["description"], workload, week, lo, hi)
            for k, row in enumerate(data["tasks"], start=1)
        ]

    def allocate_members(self, task, profiles, trust, assignment_counts, rng=None):
        check_bounds(task, len(profiles))
        bounds = (task.min_members, min(task.max_members, len(profiles)))
        ids = [p.member_id for p in profiles]
        candidates = [
            {
                "member_id": p.member_id,
                "management_competence": round(p.management_competence, 2),
                "functional_competence": round(p.functional_competence, 2),
                "research_direction": p.research_direction,
                "current_circles": assignment_counts.get(p.member_id, 0),
            }
            for p in profiles
        ]
        data = self.ask(
            DecisionKind.ALLOCATE_MEMBERS,
            {
                "min_members": str(bounds[0]),
                "max_members": str(bounds[1]),
                "task": task.to_dict(),
                "candidates": candidates,
                "trust": _trust_listing(trust, ids),
            },
            {"candidate_ids": ids, "bounds": bounds},
        )
        return list(data["members"])

    def adjust_circle(self, task, trust, allocation):
        if len(allocation) <= task.min_members:
            return list(allocation)
        data = self.ask(
            DecisionKind.ADJUST_CIRCLE,
            {
                "min_members": str(task.min_members),
                "task": task.to_dict(),
                "allocation": list(allocation),
                "trust": _trust_listing(trust, sorted(allocation)),
            },
            {"allocation": list(allocation)},
        )
        # last ballot per (voter, member) counts; the tally rule is fixed here
        ballots = {(v["voter"], v["member"]): v["vote"] for v in data["votes"]}
        dropped = []
        for member in allocation:
            drops = sum(1 for (voter, target), vote in ballots.items() if target == member and vote == "drop")
            if drops * 2 > len(allocation) - 1:
                dropped.append(member)
        if not dropped or len(allocation) - len(dropped) < task.min_members:
            return list(allocation)
        return [m for m in allocation if m not in dropped]

    def assign_roles(self, task, allocation, profiles):
        members = sorted(allocation)
        if len(members) == 1:
            return {members[0]: [Role.FACILITATOR, Role.SECRETARY]}
        by_id = {p.member_id: p for p in profiles}
        data = self.ask(
            DecisionKind.ASSIGN_ROLES,
            {
                "task": task.to_dict(),
                "members": [
                    {
                        "member_id": m,
                        "management_competence": round(by_id[m].management_competence, 2),
                        "functional_competence": round(by_id[m].functional_competence, 2),
                        "personality": by_id[m].personality,
                    }
                    for m in members
                ],
            },
            {"allocation": members},
        )
        roles = {m: [Role.MEMBER] for m in members}
        roles[data["facilitator"]] = [Role.FACILITATOR]
        roles[data["secretary"]] = [Role.SECRETARY]
        return roles

    def plan_day(self, ctx: PlanContext, rng=None) -> DayPlan:
        me = ctx.member.member_id
        open_tasks = [t for t in ctx.tasks if t.remaining > 0]
        if not open_tasks:
            return DayPlan(me)
        completions = ctx.completions
        data = self.ask(
            DecisionKind.PLAN_DAY,
            {
                "member_name": ctx.member.name,
                "member_id": me,
                "day": str(ctx.day),
                "hours_per_day": str(ctx.hours_per_day),
                "stress": f"{ctx.stress:.2f}",
                "profile": ctx.member.to_dict(),
                "tasks": [
                    {
                        "task_id": t.task_id,
                        "title": t.spec.title,
                        "circle": list(t.allocation),
                        "roles": {m: [r.value for r in rs] for m, rs in sorted(t.roles.items())},
                        "completion": round(completions[t.task_id], 4),
                        "remaining_hours": round(t.remaining, 2),
                    }
                    for t in open_tasks
                ],
                "memory": ctx.memory.text or "none",
                "records": [r.to_dict() for r in ctx.records],
            },
            {
                "member_id": me,
                "hours_per_day": ctx.hours_per_day,
                "circles": {t.task_id: list(t.allocation) for t in open_tasks},
            },
        )
        entries = tuple(
            PlanEntry(me, e["task_id"], float(e["hours"]), tuple(e.get("partners", ())), Activity(e["activity"]))
            for e in data["entries"]
        )
        return DayPlan(me, entries)

    def plan_all(self, contexts: list[PlanContext], rng=None) -> list[DayPlan]:
        """Plans with at most ``max_concurrent_requests`` requests in flight, joined in input order."""
        workers = min(self.config.max_concurrent_requests, max(1, len(contexts)))
        if workers == 1:
            return [self.plan_day(ctx, rng) for ctx in contexts]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.plan_day, contexts))

    def summarize_cycle(self, records: list[WorkRecord], evaluation: float | None = None) -> MemoryDigest:
        if not records and evaluation is None:
            return MemoryDigest()
        totals, partners = aggregate_records(records)
        data = self.ask(
            DecisionKind.SUMMARIZE_CYCLE,
            {
                "task_hours": totals or "none",
                "partners": partners or "none",
                "evaluation": "none" if evaluation is None else f"{evaluation:.3f}",
            },
            {"task_hours": list(totals)},
        )
        return MemoryDigest(text=data["text"], task_hours=totals, partner_counts=partners, last_evaluation=evaluation)

    def close(self) -> None:
        self.client.close()


__all__ = [
    "API_KEY_ENV",
    "LlmBrain",
    "LlmEndpointConfig",
    "SCHEMAS",
    "complete_with_retry",
    "load_template",
    "render_messages",
    "validate_reply",
]

