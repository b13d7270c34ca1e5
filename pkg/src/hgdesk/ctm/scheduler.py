"""Background sweep driving everything time-based in the service.

Each tick, in order:

1. materialize today's occurrences for daily-mode tasks,
2. expire occurrences whose window has closed,
3. publish datasets for closed days and enqueue one analytics job each,
4. return expired job leases to the ready queue,
5. evaluate rules whose evaluation time has passed.

Every step is idempotent, so overlapping or repeated ticks are safe, and
a tick driven by a manual clock behaves identically to the wall-clock
loop used by the long-running server.
"""
from __future__ import annotations

import logging
import threading
from typing import Any

from hgdesk.clock import Clock
from hgdesk.ctm.rules import evaluate_rule
from hgdesk.ctm.service import CtmService
from hgdesk.domain.entities import Rule, Task
from hgdesk.domain.timefmt import MS_PER_DAY, at_time_of_day, day_of_ms
from hgdesk.jobqueue import JobQueue
from hgdesk.store.datastore import Datastore

__all__ = ["Scheduler", "DEFAULT_RULE_TIME"]

log = logging.getLogger("hgdesk.scheduler")

DEFAULT_RULE_TIME = "21:00"


class Scheduler:
    def __init__(
        self,
        store: Datastore,
        queue: JobQueue,
        service: CtmService,
        clock: Clock,
        tick_secs: float = 5.0,
    ) -> None:
        self.store = store
        self.queue = queue
        self.service = service
        self.clock = clock
        self.tick_secs = tick_secs

    # ------------------------------------------------------------------
    # one sweep
    # ------------------------------------------------------------------

    def tick(self, now_ms: int | None = None) -> dict[str, Any]:
        now = self.clock.now_ms() if now_ms is None else now_ms
        occurrences_created = self._materialize_daily(day_of_ms(now))
        occurrences_expired = self.store.expire_due_occurrences(now)

        jobs_enqueued = 0
        datasets_published = 0
        for dataset in self.store.publish_datasets(now):
            datasets_published += 1
            test, _, _ = self.store.get_test(dataset.test_id)
            _, fresh = self.queue.enqueue(dataset.dataset_id, test.kind)
            if fresh:
                jobs_enqueued += 1

        jobs_requeued, jobs_dead = self.queue.requeue_expired(now)
        rules_evaluated = self._evaluate_due_rules(now)
        return {
            "now": now,
            "occurrences_created": occurrences_created,
            "occurrences_expired": occurrences_expired,
            "datasets_published": datasets_published,
            "jobs_enqueued": jobs_enqueued,
            "jobs_requeued": jobs_requeued,
            "jobs_dead": jobs_dead,
            "rules_evaluated": rules_evaluated,
        }

    def _materialize_daily(self, day: str) -> int:
        created = 0
        for task in self.store.list_tasks():
            if not self._daily_task_covers(task, day):
                continue
            cohort = self.store.get_cohort(task.cohort_id)
            created += len(self.service.materialize_occurrences(task, cohort.member_ids, day))
        return created

    @staticmethod
    def _daily_task_covers(task: Task, day: str) -> bool:
        if task.schedule.mode != "daily":
            return False
        if task.schedule.start_date and day < task.schedule.start_date:
            return False
        if task.schedule.end_date and day > task.schedule.end_date:
            return False
        return True

    def _evaluate_due_rules(self, now: int) -> int:
        # sweep yesterday too, so a server that slept through the end of a
        # day still evaluates it on wake; both checks are replay-safe.
        days = (day_of_ms(now - MS_PER_DAY), day_of_ms(now))
        evaluated = 0
        for rule in self.store.list_rules(active_only=True):
            for day in days:
                if now < self._evaluation_time(rule, day):
                    continue
                if self.store.get_rule_run(rule.rule_id, day) is not None:
                    continue
                try:
                    outcome = evaluate_rule(self.service, rule, day)
                except Exception:  # a broken rule must not stall the sweep
                    log.exception("rule %s failed for %s", rule.rule_id, day)
                    continue
                if outcome.ran:
                    evaluated += 1
        return evaluated

    def _evaluation_time(self, rule: Rule, day: str) -> int:
        """When the rule's day is complete enough to judge.

        Daily triggers carry their own time; result triggers wait for the
        day's last occurrence window to close (default 21:00 when the day
        has no occurrences to wait for).
        """
        if rule.trigger.get("type") == "daily":
            return at_time_of_day(day, str(rule.trigger["time"]))
        latest = self.store.max_window_end(rule.study_id, day)
        if latest is not None:
            return latest
        return at_time_of_day(day, DEFAULT_RULE_TIME)

    # ------------------------------------------------------------------
    # wall-clock loop
    # ------------------------------------------------------------------

    def run_forever(self, stop: threading.Event) -> None:
        while not stop.wait(self.tick_secs):
            try:
                self.tick()
            except Exception:
                log.exception("scheduler tick failed")
