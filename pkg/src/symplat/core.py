"""Platform core: the serialized command stream behind the API and harness.

One instance owns the scheduler, the node engine and the metric bus, advances
virtual time in 1000 ms ticks, and exposes the operation table that both the
wire service and the scenario runner drive. In asymmetric mode (the static
baseline) adjustment, boundary conditions and subscriptions are disabled and
I/O reservations are ignored: all I/O becomes best-effort.
"""

from __future__ import annotations

import itertools

from . import model
from .engine import SimEngine
from .model import (
    TICK_MS,
    LogicalStatus,
    PlatformEnvEvent,
    ResourceVector,
)
from .scheduler import ReservationScheduler, SchedulerError
from .telemetry import BoundaryCondition, MetricBus, Subscription, TelemetryError


class ApiError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class PolicyDisabled(ApiError):
    def __init__(self, op):
        super().__init__("policy_disabled", f"{op} is not available in asymmetric mode")


OPERATOR_OPS = {"drain_node", "freeze_app", "thaw_app"}
SYMMETRIC_ONLY_OPS = {"adjust", "register_boundary", "drop_boundary",
                      "subscribe_metrics", "subscribe_events"}


class PlatformCore:
    def __init__(self, nodes, images=(), mode="symmetric", grace_s=60, retention_s=3600):
        if mode not in ("symmetric", "asymmetric"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        symmetric = mode == "symmetric"
        self.scheduler = ReservationScheduler(nodes, grace_s=grace_s, io_reservations=symmetric)
        self.engine = SimEngine(nodes, io_guarantees=symmetric)
        self.bus = MetricBus(retention_s=retention_s)
        self.images = {}
        for img in images:
            self.images[img.image_id] = img
        self.owners: dict[str, str] = {}  # app_id -> tenant
        self.now = 0
        self.event_log: list[dict] = []
        self.outcomes: dict[str, str] = {}
        self.latest_samples: dict[str, dict[int, model.PhysicalSample]] = {}
        self.latest_node_samples: dict[str, model.NodeSample] = {}
        self._pending_completions: dict[int, list[str]] = {}
        self._pending_error_kill: dict[int, list[str]] = {}
        self._event_subs: dict[str, tuple[Subscription, str | None]] = {}
        self._sub_seq = itertools.count(1)
        self.last_tick_result = None

    # ------------------------------------------------------------------
    # event plumbing

    def _record_event(self, ev):
        self.event_log.append({"type": "env_event", **ev.to_json()})
        msg = {"type": "event", **ev.to_json()}
        for sub_id in sorted(self._event_subs):
            sub, app_filter = self._event_subs[sub_id]
            if app_filter is None or app_filter == ev.app_id:
                sub.deliver(msg)

    def _record_lifecycle(self, name, app_id, t, **extra):
        self.event_log.append({"type": "lifecycle", "event": name, "app_id": app_id,
                               "t": t, **extra})

    def _checkpoint_t(self, app_id):
        app = self.engine.apps.get(app_id)
        return app.last_checkpoint_t if app else None

    # ------------------------------------------------------------------
    # clock

    def tick(self):
        """Advance the platform over [now, now + 1000)."""
        now = self.now

        for app_id in self._pending_error_kill.pop(now, []):
            if app_id in self.engine.apps:
                ev = PlatformEnvEvent(event="Terminating", app_id=app_id,
                                      reason="logical error state", effective_at=now)
                self._record_event(ev)
                self.engine.apply_env_event(ev)
                self.scheduler.finish(app_id, now, "TerminatedError",
                                      last_checkpoint_t=None)
                self.outcomes[app_id] = "TerminatedError"

        for app_id in self._pending_completions.pop(now, []):
            if app_id in self.engine.apps and app_id not in self.outcomes:
                self.scheduler.finish(app_id, now, "Completed")
                self.engine.remove_app(app_id)
                self.outcomes[app_id] = "Completed"
                self._record_lifecycle("Completed", app_id, now)

        for app_id in self.scheduler.activate_due(now):
            spec = self.scheduler.specs[app_id]
            res = self.scheduler.reservations[app_id]
            self.engine.add_app(spec, res.placement, now)
            self._record_lifecycle("Started", app_id, now,
                                   placement={str(k): v for k, v in sorted(res.placement.items())})

        for ev in self.scheduler.enforce_walltime(now, checkpoint_t=self._checkpoint_t):
            self._record_event(ev)
            if ev.app_id in self.engine.apps:
                self.engine.apply_env_event(ev)
            if ev.event == "Terminating":
                self.outcomes[ev.app_id] = "TerminatedWalltime"

        result = self.engine.step_tick(now)
        self.last_tick_result = result

        for sample in result.samples:
            self.latest_samples.setdefault(sample.app_id, {})[sample.task_id] = sample
        for ns in result.node_samples:
            self.latest_node_samples[ns.node_id] = ns
        if self.mode == "symmetric":
            for sample in result.samples:
                self.bus.publish(sample)
            for ns in result.node_samples:
                self.bus.publish(ns)

        for app_id in result.completions:
            self._pending_completions.setdefault(now + TICK_MS, []).append(app_id)
        for app_id in result.errors:
            # policy: a logical Error observed via telemetry terminates the
            # reservation one tick later
            self._pending_error_kill.setdefault(now + TICK_MS, []).append(app_id)

        self.now = now + TICK_MS
        return result

    def active_or_pending(self):
        live = {a for a, r in self.scheduler.reservations.items()
                if r.status in ("Queued", "Scheduled", "Active", "Frozen")}
        return live or self._pending_completions or self._pending_error_kill

    # ------------------------------------------------------------------
    # operation table

    def handle(self, op, payload, tenant=None, operator=False, sink=None):
        """Run one API operation. Raises ApiError with a machine-readable code."""
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise ApiError("unknown_op", f"unknown operation {op!r}")
        if op in OPERATOR_OPS and not operator:
            raise ApiError("forbidden", f"{op} requires the operator flag")
        if op in SYMMETRIC_ONLY_OPS and self.mode != "symmetric":
            raise PolicyDisabled(op)
        if not isinstance(payload, dict):
            raise ApiError("malformed_message", "payload must be an object")
        try:
            return handler(payload, tenant=tenant, operator=operator, sink=sink)
        except model.ModelError as exc:
            raise ApiError(exc.code, str(exc)) from exc
        except SchedulerError as exc:
            raise ApiError(exc.code, str(exc)) from exc
        except TelemetryError as exc:
            raise ApiError(exc.code, str(exc)) from exc
        except KeyError as exc:
            raise ApiError("malformed_message", f"missing field {exc}") from exc

    def _require_owner(self, app_id, tenant, operator):
        if operator:
            return
        if app_id not in self.owners:
            raise ApiError("no_such_app", f"no app {app_id}")
        if tenant is not None and self.owners[app_id] != tenant:
            raise ApiError("forbidden", f"app {app_id} belongs to another tenant")

    def _op_register_image(self, payload, tenant=None, **_):
        img = model.EnvironmentImage.from_json(payload)
        if img.image_id in self.images:
            raise ApiError("duplicate_image", f"image {img.image_id} already registered")
        self.images[img.image_id] = img
        return {"image_id": img.image_id}

    def _op_submit(self, payload, tenant=None, **_):
        spec = model.ApplicationSpec.from_json(payload["spec"])
        if spec.kind == "container" and spec.image not in self.images:
            raise ApiError("unknown_image", f"image {spec.image!r} is not registered")
        res = self.scheduler.submit(spec, self.now)
        self.owners[spec.app_id] = tenant or "anonymous"
        self._record_lifecycle("Submitted", spec.app_id, self.now)
        return {"reservation": res.to_json()}

    def _op_cancel(self, payload, tenant=None, operator=False, **_):
        app_id = payload["app_id"]
        self._require_owner(app_id, tenant, operator)
        res = self.scheduler.reservations.get(app_id)
        was_live = res is not None and res.status in ("Active", "Frozen")
        res = self.scheduler.cancel(app_id, self.now)
        if was_live:
            for name in ("Draining", "Terminating"):
                ev = PlatformEnvEvent(event=name, app_id=app_id,
                                      reason="cancelled by tenant", effective_at=self.now)
                self._record_event(ev)
                if name == "Terminating" and app_id in self.engine.apps:
                    self.engine.apply_env_event(ev)
        self.outcomes[app_id] = "Cancelled"
        return {"reservation": res.to_json()}

    def _op_status(self, payload, **_):
        app_id = payload["app_id"]
        res = self.scheduler.reservations.get(app_id)
        if res is None:
            raise ApiError("no_such_app", f"no app {app_id}")
        app = self.engine.apps.get(app_id)
        status = app.status if app else LogicalStatus(updated_at=self.now)
        out = {"reservation": res.to_json(), "logical": status.to_json()}
        if app and app.drain_deadline is not None:
            out["drain_deadline"] = app.drain_deadline
        return out

    def _op_physical_model(self, payload, **_):
        app_id = payload["app_id"]
        if app_id not in self.owners:
            raise ApiError("no_such_app", f"no app {app_id}")
        tasks = self.latest_samples.get(app_id, {})
        return {"app_id": app_id,
                "tasks": [tasks[tid].to_json() for tid in sorted(tasks)]}

    def _op_env_model(self, payload, **_):
        plan = self.scheduler.plan(self.now)
        queue = [{"app_id": a, "planned_start": plan.planned[a][0]} for a in plan.order]
        return {
            "nodes": [n.to_json() for n in self.scheduler.nodes],
            "node_samples": [self.latest_node_samples[n].to_json()
                             for n in sorted(self.latest_node_samples)],
            "queue": queue,
            "now": self.now,
        }

    def _op_set_logical_state(self, payload, tenant=None, operator=False, **_):
        app_id = payload["app_id"]
        self._require_owner(app_id, tenant, operator)
        app = self.engine.apps.get(app_id)
        if app is None:
            raise ApiError("no_such_app", f"app {app_id} is not running")
        requested = LogicalStatus(
            state=payload.get("state", app.status.state),
            progress=payload.get("progress", app.status.progress),
            updated_at=self.now,
        )
        accepted = model.logical_transition(
            app.status, requested, self.now,
            checkpoint_progress=app.last_checkpoint_progress,
        )
        self.engine.set_logical_status(app_id, accepted)
        return {"logical": accepted.to_json()}

    def _op_report_progress(self, payload, tenant=None, operator=False, **_):
        payload = dict(payload)
        payload.setdefault("state", None)
        app = self.engine.apps.get(payload["app_id"])
        if app is not None and payload["state"] is None:
            payload["state"] = app.status.state
        return self._op_set_logical_state(payload, tenant=tenant, operator=operator)

    def _op_adjust(self, payload, tenant=None, operator=False, **_):
        app_id = payload["app_id"]
        self._require_owner(app_id, tenant, operator)
        delta = ResourceVector.from_json(payload.get("delta_per_task", {}))
        extension_s = payload.get("walltime_extension_s", 0)
        decision, granted_delta, granted_ext, reason = self.scheduler.request_adjustment(
            app_id, delta, extension_s, self.now)
        if decision != "Denied":
            ev = PlatformEnvEvent(
                event="Adjusting", app_id=app_id, reason=reason,
                effective_at=self.now, detail=granted_delta,
            )
            # push before response: subscribers hear about the grant first
            self._record_event(ev)
            if app_id in self.engine.apps:
                self.engine.apply_env_event(ev)
        return {
            "decision": decision,
            "granted_delta": granted_delta.to_json(),
            "granted_extension_s": granted_ext,
            "reason": reason,
        }

    def _op_register_boundary(self, payload, **_):
        bc = BoundaryCondition.from_json(payload)
        self.bus.register_boundary(bc)
        return {"bc_id": bc.bc_id}

    def _op_drop_boundary(self, payload, **_):
        self.bus.drop_boundary(payload["bc_id"])
        return {"bc_id": payload["bc_id"]}

    def _op_subscribe_metrics(self, payload, sink=None, **_):
        subject = payload.get("subject") or {}
        sub = self.bus.subscribe(
            subject_kind=subject.get("kind"),
            subject_id=subject.get("id"),
            sink=sink,
        )
        return {"subscription_id": sub.sub_id}

    def _op_unsubscribe(self, payload, **_):
        sub_id = payload["subscription_id"]
        if sub_id in self._event_subs:
            del self._event_subs[sub_id]
            return {"subscription_id": sub_id}
        self.bus.unsubscribe(sub_id)
        return {"subscription_id": sub_id}

    def _op_subscribe_events(self, payload, sink=None, **_):
        sub_id = f"evsub-{next(self._sub_seq)}"
        sub = Subscription(sub_id, matcher=lambda m: True, sink=sink)
        self._event_subs[sub_id] = (sub, payload.get("app_id"))
        return {"subscription_id": sub_id}

    def poll_subscription(self, sub_id):
        if sub_id in self._event_subs:
            return self._event_subs[sub_id][0].poll()
        sub = self.bus.subscriptions.get(sub_id)
        if sub is None:
            raise ApiError("unknown_subscription", f"no subscription {sub_id}")
        return sub.poll()

    def _op_drain_node(self, payload, **_):
        node_id = payload["node_id"]
        if node_id not in self.scheduler.capacity:
            raise ApiError("no_such_node", f"no node {node_id}")
        drained = []
        for app_id in sorted(self.engine.apps):
            app = self.engine.apps[app_id]
            if any(t.node_id == node_id for t in app.tasks.values()):
                ev = PlatformEnvEvent(event="Draining", app_id=app_id,
                                      reason=f"operator drain of {node_id}",
                                      effective_at=self.now)
                self._record_event(ev)
                self.engine.apply_env_event(ev)
                drained.append(app_id)
        return {"node_id": node_id, "draining": drained}

    def _op_freeze_app(self, payload, **_):
        app_id = payload["app_id"]
        self.scheduler.set_frozen(app_id, True)
        ev = PlatformEnvEvent(event="Freezing", app_id=app_id,
                              reason="operator freeze", effective_at=self.now)
        self._record_event(ev)
        if app_id in self.engine.apps:
            self.engine.apply_env_event(ev)
        return {"app_id": app_id, "frozen": True}

    def _op_thaw_app(self, payload, **_):
        app_id = payload["app_id"]
        res = self.scheduler.reservations.get(app_id)
        if res is None:
            raise ApiError("no_such_app", f"no app {app_id}")
        if res.status != "Frozen":
            raise ApiError("not_frozen", f"app {app_id} is not frozen")
        self.scheduler.set_frozen(app_id, False)
        ev = PlatformEnvEvent(event="Thawed", app_id=app_id,
                              reason="operator thaw", effective_at=self.now)
        self._record_event(ev)
        if app_id in self.engine.apps:
            self.engine.apply_env_event(ev)
        return {"app_id": app_id, "frozen": False}

    def _op_utilization_report(self, payload, **_):
        t0 = payload.get("t0", 0)
        t1 = payload.get("t1", self.now)
        return self.scheduler.utilization_report(t0, t1).to_json()
