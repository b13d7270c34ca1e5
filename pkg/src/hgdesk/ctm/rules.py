"""Rule-engine evaluation: daily batch filtering of results into sub-cohorts.

A rule watches one result metric. Once per calendar day — at the day's
last occurrence window end, or on explicit request — the day's results
from the rule's source cohort are filtered by the predicate; matching
subjects become a new frozen sub-cohort, and a follow-up once-task maps
the action's test-set onto it for the next day. Evaluation is recorded
per (rule, day) so replays and overlapping ticks cannot double-fire.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from hgdesk.ctm.service import CtmService
from hgdesk.domain.entities import Rule
from hgdesk.domain.timefmt import MS_PER_DAY, day_bounds_ms, day_of_ms, parse_day
from hgdesk.domain.validation import METRICS_BY_WORKER_KIND
from hgdesk.errors import ValidationFailed

__all__ = ["RuleOutcome", "evaluate_rule", "worker_kind_for_metric"]

DEFAULT_FOLLOWUP_WINDOW = ("09:00", "21:00")


@dataclass(frozen=True)
class RuleOutcome:
    rule_id: str
    day: str
    ran: bool  # False when this call found the (rule, day) already consumed
    matched: tuple[str, ...] = ()
    skipped: tuple[str, ...] = ()  # subjects whose result lacked the metric
    evaluated: int = 0  # subjects with a usable result
    cohort_id: str | None = None
    task_id: str | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "day": self.day,
            "ran": self.ran,
            "matched": list(self.matched),
            "skipped": list(self.skipped),
            "evaluated": self.evaluated,
            "cohort_id": self.cohort_id,
            "task_id": self.task_id,
        }


def worker_kind_for_metric(metric: str) -> str | None:
    for kind, metrics in METRICS_BY_WORKER_KIND.items():
        if metric in metrics:
            return kind
    return None


def _compare(value: float, comparator: str, target: float) -> bool:
    if comparator == "<":
        return value < target
    if comparator == "<=":
        return value <= target
    if comparator == ">":
        return value > target
    if comparator == ">=":
        return value >= target
    return value == target


def _next_day(day: str) -> str:
    start, _ = day_bounds_ms(day)
    return day_of_ms(start + MS_PER_DAY)


def evaluate_rule(service: CtmService, rule: Rule, day: str) -> RuleOutcome:
    """Evaluate one rule for one calendar day, exactly once.

    The day's results (latest per subject for the metric's worker kind)
    from the source cohort are filtered; a non-empty match creates the
    sub-cohort and schedules the follow-up once-task for the next day.
    """
    parse_day(day)  # reject malformed days before consuming the slot
    store = service.store

    existing = store.get_rule_run(rule.rule_id, day)
    if existing is not None:
        detail = json.loads(existing["detail"]) if existing["detail"] else {}
        return RuleOutcome(
            rule_id=rule.rule_id,
            day=day,
            ran=False,
            matched=tuple(detail.get("matched", ())),
            skipped=tuple(detail.get("skipped", ())),
            evaluated=int(detail.get("evaluated", 0)),
            cohort_id=existing["cohort_id"],
            task_id=existing["task_id"],
            detail=detail,
        )

    trigger = rule.trigger
    metric = str(rule.predicate.get("metric"))
    if trigger.get("type") == "on_result":
        worker_kind = str(trigger.get("worker_kind"))
    else:
        worker_kind = worker_kind_for_metric(metric) or ""
    if not worker_kind:
        raise ValidationFailed(f"rule {rule.rule_id}: no worker kind emits {metric!r}")

    source = store.get_cohort(str(rule.action["source_cohort_id"]))
    members = set(source.member_ids)
    day_start, day_end = day_bounds_ms(day)
    results = store.query_results(
        study_id=rule.study_id, worker_kind=worker_kind, from_ms=day_start, to_ms=day_end
    )

    latest: dict[str, Any] = {}
    for result in results:  # ascending produced_at -> last write wins
        if result.subject_id in members:
            latest[result.subject_id] = result

    comparator = str(rule.predicate["comparator"])
    target = float(rule.predicate["value"])
    matched: list[str] = []
    skipped: list[str] = []
    evaluated = 0
    for subject_id in sorted(latest):
        body_value = latest[subject_id].body.get(metric)
        if not isinstance(body_value, (int, float)) or isinstance(body_value, bool):
            skipped.append(subject_id)
            continue
        evaluated += 1
        if _compare(float(body_value), comparator, target):
            matched.append(subject_id)

    cohort_id: str | None = None
    task_id: str | None = None
    if matched:
        cohort = service.define_cohort(
            rule.study_id,
            name=f"{rule.action['sub_cohort_name']}-{day}",
            selector={"type": "explicit", "member_ids": matched},
            origin={"type": "rule", "rule_id": rule.rule_id, "day": day},
        )
        cohort_id = cohort.cohort_id
        followup_day = _next_day(day)
        task, _ = service.create_task(
            rule.study_id,
            str(rule.action["target_testset_id"]),
            cohort.cohort_id,
            {
                "mode": "once",
                "window_start": DEFAULT_FOLLOWUP_WINDOW[0],
                "window_end": DEFAULT_FOLLOWUP_WINDOW[1],
                "start_date": followup_day,
            },
            created_by={"type": "rule", "rule_id": rule.rule_id, "day": day},
        )
        task_id = task.task_id

    detail = {"matched": matched, "skipped": skipped, "evaluated": evaluated}
    fresh = store.record_rule_run(rule.rule_id, day, cohort_id, task_id, detail)
    if not fresh:
        # lost a race with a concurrent evaluation: report the stored run
        return evaluate_rule(service, rule, day)
    return RuleOutcome(
        rule_id=rule.rule_id,
        day=day,
        ran=True,
        matched=tuple(matched),
        skipped=tuple(skipped),
        evaluated=evaluated,
        cohort_id=cohort_id,
        task_id=task_id,
        detail=detail,
    )
