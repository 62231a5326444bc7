"""Deterministic node engine: runs workload traces against reserved capacity.

Each 1000 ms tick, every task's effective rate per dimension is
min(demand, guaranteed + best-effort share), where the best-effort share is a
max-min fair split of the node's residual capacity among tasks demanding more
than their guarantee. cpu and memory are hard allocations (no best-effort):
a task never exceeds its reservation there. I/O dimensions are guaranteed only
when I/O reservations are enabled; otherwise everything I/O is best-effort.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import (
    IO_DIMS,
    TICK_MS,
    LogicalStatus,
    PhysicalSample,
    NodeSample,
    ResourceVector,
    ZERO,
)

BEST_EFFORT_DIMS = ("net_in_bps", "net_out_bps", "fs_bps", "fs_iops")


class EngineError(Exception):
    code = "engine_error"


class UnknownApp(EngineError):
    code = "unknown_app"


def water_fill(pool, demands):
    """Max-min fair integer split of `pool` across `demands`.

    Returns per-entry allocations, each <= its demand, summing to
    min(pool, sum(demands)). Remainder units that do not divide evenly go one
    each to the earliest entries, so callers must pass demands in a canonical
    order for determinism.
    """
    alloc = [0] * len(demands)
    active = [i for i, d in enumerate(demands) if d > 0]
    remaining = pool
    while remaining > 0 and active:
        share = remaining // len(active)
        if share == 0:
            for i in active[:remaining]:
                alloc[i] += 1
            break
        still = []
        for i in active:
            give = min(share, demands[i] - alloc[i])
            alloc[i] += give
            remaining -= give
            if alloc[i] < demands[i]:
                still.append(i)
        if len(still) == len(active):
            # nobody saturated; distribute the sub-share remainder and stop
            for i in active[:remaining]:
                alloc[i] += 1
            break
        active = still
    return alloc


@dataclass
class TaskRuntime:
    app_id: str
    task_id: int
    node_id: str
    phase_index: int = 0
    work_done: int = 0
    frozen: bool = False
    storage_used: int = 0
    done: bool = False


@dataclass
class AppRuntime:
    app_id: str
    kind: str
    trace: tuple
    reserved: ResourceVector  # per task
    tasks: dict[int, TaskRuntime] = field(default_factory=dict)
    status: LogicalStatus = field(default_factory=LogicalStatus)
    last_checkpoint_progress: float = 0.0
    last_checkpoint_t: int | None = None
    drain_deadline: int | None = None

    def colocated(self):
        return len({t.node_id for t in self.tasks.values()}) <= 1


@dataclass
class TickResult:
    samples: list
    node_samples: list
    completions: list  # app_ids that finished their whole trace this tick
    errors: list  # app_ids that entered logical Error this tick


class SimEngine:
    def __init__(self, nodes, io_guarantees=True):
        self.nodes = sorted(nodes, key=lambda n: n.node_id)
        self.capacity = {n.node_id: n.capacity for n in self.nodes}
        self.apps: dict[str, AppRuntime] = {}
        self.io_guarantees = io_guarantees
        self.last_allocations = []  # (app_id, task_id, dim, demand, reserved, effective)

    # -- lifecycle -------------------------------------------------------

    def add_app(self, spec, placement, now):
        app = AppRuntime(
            app_id=spec.app_id,
            kind=spec.kind,
            trace=spec.trace,
            reserved=spec.per_task_reservation,
            status=LogicalStatus(state="Running", progress=0.0, updated_at=now),
        )
        for tid in sorted(placement):
            app.tasks[tid] = TaskRuntime(app_id=spec.app_id, task_id=tid, node_id=placement[tid])
        self.apps[spec.app_id] = app
        return app

    def remove_app(self, app_id):
        return self.apps.pop(app_id, None)

    def apply_env_event(self, ev):
        app = self.apps.get(ev.app_id)
        if app is None:
            raise UnknownApp(f"no app {ev.app_id} on this engine")
        if ev.event == "Draining":
            app.drain_deadline = ev.effective_at
        elif ev.event == "Terminating":
            self.remove_app(ev.app_id)
        elif ev.event == "Freezing":
            for t in app.tasks.values():
                t.frozen = True
        elif ev.event == "Thawed":
            for t in app.tasks.values():
                t.frozen = False
        elif ev.event == "Adjusting":
            if ev.detail is not None:
                app.reserved = app.reserved.add(ev.detail)
        return app

    def set_logical_status(self, app_id, status):
        app = self.apps.get(app_id)
        if app is None:
            raise UnknownApp(f"no app {app_id} on this engine")
        app.status = status

    # -- tick ------------------------------------------------------------

    def _task_demand(self, app, task):
        if task.frozen or task.done:
            return ZERO
        phase = app.trace[task.phase_index]
        demand = phase.demand
        if phase.kind == "net_io" and len(app.tasks) > 1 and app.colocated():
            # intra-app traffic between co-located tasks never touches the wire
            demand = ResourceVector(**{
                d: 0 if d in ("net_in_bps", "net_out_bps") else getattr(demand, d)
                for d in demand.to_json()
            })
        return demand

    def _guaranteed(self, demand, reserved, dim):
        if dim in BEST_EFFORT_DIMS and not self.io_guarantees:
            return 0
        return min(demand.get(dim), reserved.get(dim))

    def step_tick(self, now):
        """Advance all tasks over [now, now+1000). Samples are stamped `now`."""
        self.last_allocations = []
        rates = {}  # (app_id, task_id) -> {dim: effective}
        node_used = {n.node_id: {d: 0 for d in ("cpu_cores", "memory_bytes", *BEST_EFFORT_DIMS, "storage_bytes")} for n in self.nodes}

        ordered_apps = [self.apps[a] for a in sorted(self.apps)]
        tasks_by_node = {n.node_id: [] for n in self.nodes}
        for app in ordered_apps:
            for tid in sorted(app.tasks):
                task = app.tasks[tid]
                tasks_by_node[task.node_id].append((app, task))
                rates[(app.app_id, tid)] = {}

        for nid, pairs in tasks_by_node.items():
            cap = self.capacity[nid]
            # hard dimensions: never more than reserved
            for app, task in pairs:
                demand = self._task_demand(app, task)
                for dim in ("cpu_cores", "memory_bytes"):
                    eff = min(demand.get(dim), app.reserved.get(dim))
                    rates[(app.app_id, task.task_id)][dim] = eff
                    node_used[nid][dim] += eff
                    self.last_allocations.append(
                        (app.app_id, task.task_id, dim, demand.get(dim),
                         app.reserved.get(dim), eff)
                    )
            # contended rate dimensions: guarantee + max-min split of residual
            for dim in BEST_EFFORT_DIMS:
                guaranteed = []
                extras = []
                for app, task in pairs:
                    demand = self._task_demand(app, task)
                    g = self._guaranteed(demand, app.reserved, dim)
                    guaranteed.append(g)
                    extras.append(max(0, demand.get(dim) - g))
                residual = cap.get(dim) - sum(guaranteed)
                shares = water_fill(residual, extras)
                for (app, task), g, share in zip(pairs, guaranteed, shares):
                    demand = self._task_demand(app, task)
                    eff = g + share
                    rates[(app.app_id, task.task_id)][dim] = eff
                    node_used[nid][dim] += eff
                    self.last_allocations.append(
                        (app.app_id, task.task_id, dim, demand.get(dim),
                         app.reserved.get(dim), eff)
                    )

        samples = []
        completions = []
        errors = []
        for app in ordered_apps:
            app_finished_tasks = 0
            for tid in sorted(app.tasks):
                task = app.tasks[tid]
                r = rates[(app.app_id, tid)]
                phase = app.trace[task.phase_index] if not task.done else None
                interproc = 0
                if phase is not None and not task.frozen:
                    advance = 0
                    if phase.kind == "compute":
                        advance = r["cpu_cores"] * (TICK_MS // 1000)
                    elif phase.kind == "fs_io":
                        advance = r["fs_bps"] * (TICK_MS // 1000)
                        if phase.demand.storage_bytes > 0:
                            task.storage_used += advance
                            # storage is a stock: writing past the reservation
                            # is an application failure
                            if (app.reserved.storage_bytes > 0
                                    and task.storage_used > app.reserved.storage_bytes
                                    and app.status.state != "Error"):
                                app.status = LogicalStatus(
                                    state="Error", progress=app.status.progress, updated_at=now)
                                errors.append(app.app_id)
                    elif phase.kind == "net_io":
                        if len(app.tasks) > 1 and app.colocated():
                            # free intra-node traffic at the demanded rate
                            interproc = max(phase.demand.net_in_bps, phase.demand.net_out_bps)
                            advance = interproc * (TICK_MS // 1000)
                        else:
                            advance = (r["net_in_bps"] + r["net_out_bps"]) * (TICK_MS // 1000)
                            if len(app.tasks) > 1:
                                interproc = r["net_in_bps"] + r["net_out_bps"]
                    elif phase.kind in ("checkpoint", "idle"):
                        advance = TICK_MS // 1000
                    task.work_done += advance
                    if task.work_done >= phase.work_amount:
                        was_error = app.status.state == "Error"
                        self._complete_phase(app, task, phase, now + TICK_MS)
                        if app.status.state == "Error" and not was_error:
                            errors.append(app.app_id)
                samples.append(PhysicalSample(
                    t=now,
                    app_id=app.app_id,
                    task_id=tid,
                    node_id=task.node_id,
                    cpu_cores_used=r["cpu_cores"],
                    memory_bytes_used=r["memory_bytes"],
                    fs_bps_used=r["fs_bps"],
                    fs_iops_used=r["fs_iops"],
                    storage_bytes_used=task.storage_used,
                    net_in_bps_used=r["net_in_bps"],
                    net_out_bps_used=r["net_out_bps"],
                    interproc_bps_used=interproc,
                ))
                node_used[task.node_id]["storage_bytes"] += task.storage_used
                if task.done:
                    app_finished_tasks += 1
            if app.tasks and app_finished_tasks == len(app.tasks):
                completions.append(app.app_id)

        node_samples = [
            NodeSample(
                t=now,
                node_id=nid,
                cpu_cores_used=node_used[nid]["cpu_cores"],
                memory_bytes_used=node_used[nid]["memory_bytes"],
                fs_bps_used=node_used[nid]["fs_bps"],
                fs_iops_used=node_used[nid]["fs_iops"],
                storage_bytes_used=node_used[nid]["storage_bytes"],
                net_in_bps_used=node_used[nid]["net_in_bps"],
                net_out_bps_used=node_used[nid]["net_out_bps"],
            )
            for nid in sorted(node_used)
        ]
        return TickResult(samples=samples, node_samples=node_samples,
                          completions=completions, errors=errors)

    @staticmethod
    def _task_progress(app, task):
        if task.done:
            return 1.0
        if task.phase_index == 0:
            return 0.0
        return app.trace[task.phase_index - 1].progress_at_end

    def _complete_phase(self, app, task, phase, completed_at):
        task.work_done = 0
        task.phase_index += 1
        if task.phase_index >= len(app.trace):
            task.done = True
            task.phase_index = len(app.trace) - 1
        if app.status.state != "Error":
            # the app-level view tracks the least-advanced task
            progress = min(self._task_progress(app, t) for t in app.tasks.values())
            app.status = LogicalStatus(
                state=phase.emits_state, progress=progress, updated_at=completed_at,
            )
            if phase.kind == "checkpoint":
                app.last_checkpoint_progress = phase.progress_at_end
                app.last_checkpoint_t = completed_at
