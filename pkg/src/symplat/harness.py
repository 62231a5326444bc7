"""Scenario runner: drives a PlatformCore through a scenario and builds a report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .core import ApiError, PlatformCore
from .model import TICK_MS


@dataclass
class Report:
    scenario: str
    mode: str
    seed: int
    finished_at_ms: int
    events: list
    apps: dict
    utilization: dict | None
    alarms: list
    op_log: list
    summary: dict

    def to_json(self):
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "finished_at_ms": self.finished_at_ms,
            "events": self.events,
            "apps": dict(sorted(self.apps.items())),
            "utilization": self.utilization,
            "alarms": self.alarms,
            "op_log": self.op_log,
            "summary": self.summary,
        }

    def to_json_str(self):
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def render_table(self):
        lines = [f"scenario: {self.scenario}  mode: {self.mode}  "
                 f"virtual end: {self.finished_at_ms // 1000} s"]
        header = f"{'app':<20} {'outcome':<20} {'start_s':>8} {'end_s':>8} {'dur_s':>8}"
        lines.append(header)
        lines.append("-" * len(header))
        for app_id in sorted(self.summary):
            row = self.summary[app_id]
            start = row.get("started_at_s")
            end = row.get("finished_at_s")
            dur = row.get("duration_s")
            lines.append(f"{app_id:<20} {row['outcome']:<20} "
                         f"{start if start is not None else '-':>8} "
                         f"{end if end is not None else '-':>8} "
                         f"{dur if dur is not None else '-':>8}")
        hollow = self.utilization["hollow_core_seconds"] if self.utilization else 0
        lines.append(f"hollow core-seconds: {hollow}   alarms: {len(self.alarms)}")
        return "\n".join(lines)


class ScenarioRunner:
    """Single-threaded deterministic execution of one scenario."""

    def __init__(self, scenario, mode_override=None):
        self.scenario = scenario
        self.mode = mode_override or scenario.mode
        self.core = PlatformCore(
            scenario.nodes, scenario.images, mode=self.mode,
            grace_s=scenario.grace_s, retention_s=scenario.retention_s,
        )
        self.op_log = []
        self._started_at = {}
        self._finished_at = {}

    def _exec(self, op, payload, tenant=None, operator=False):
        entry = {"t": self.core.now, "op": op}
        try:
            result = self.core.handle(op, payload, tenant=tenant, operator=operator)
            entry["result"] = result
        except ApiError as exc:
            entry["error"] = {"code": exc.code, "message": str(exc)}
        self.op_log.append(entry)
        return entry

    def run(self, on_tick=None):
        """Execute the scenario; `on_tick(core)` is called after every tick."""
        core = self.core
        scenario = self.scenario
        submits = list(scenario.apps)
        script = list(scenario.script)

        while core.now < scenario.duration_ms:
            while submits and submits[0][1] <= core.now:
                spec, _, tenant = submits.pop(0)
                self._exec("submit", {"spec": spec.to_json()}, tenant=tenant)
            while script and script[0].at_ms <= core.now:
                op = script.pop(0)
                self._exec(op.op, op.payload, tenant=op.tenant, operator=op.operator)
            seen_start = set(self._started_at)
            core.tick()
            if on_tick is not None:
                on_tick(core)
            for entry in core.event_log:
                if entry["type"] == "lifecycle" and entry["event"] == "Started" \
                        and entry["app_id"] not in seen_start:
                    self._started_at.setdefault(entry["app_id"], entry["t"])
            if not submits and not script and not core.active_or_pending():
                break

        return self._build_report()

    def _build_report(self):
        core = self.core
        outcomes = {}
        summary = {}
        for app_id in sorted(core.scheduler.reservations):
            res = core.scheduler.reservations[app_id]
            outcome = core.outcomes.get(app_id, res.status)
            outcomes[app_id] = outcome
            started = finished = None
            for entry in core.event_log:
                if entry.get("app_id") != app_id:
                    continue
                if entry["type"] == "lifecycle" and entry["event"] == "Started":
                    started = entry["t"]
                if (entry["type"] == "lifecycle" and entry["event"] == "Completed") or (
                        entry["type"] == "env_event" and entry["event"] == "Terminating"):
                    finished = entry.get("t", entry.get("effective_at"))
            summary[app_id] = {"outcome": outcome}
            summary[app_id]["started_at_s"] = started // 1000 if started is not None else None
            summary[app_id]["finished_at_s"] = finished // 1000 if finished is not None else None
            summary[app_id]["duration_s"] = (
                (finished - started) // 1000 if started is not None and finished is not None
                else None)

        utilization = None
        if core.now > 0:
            utilization = core.scheduler.utilization_report(0, core.now).to_json()

        return Report(
            scenario=self.scenario.name,
            mode=self.mode,
            seed=self.scenario.seed,
            finished_at_ms=core.now,
            events=list(core.event_log),
            apps=outcomes,
            utilization=utilization,
            alarms=[a.to_json() for a in core.bus.alarm_log],
            op_log=self.op_log,
            summary=summary,
        )


def run_scenario(scenario, mode_override=None):
    return ScenarioRunner(scenario, mode_override=mode_override).run()
