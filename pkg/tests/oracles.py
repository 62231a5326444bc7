"""Independent oracles used by the test suite.

These intentionally re-derive expected results by brute force or closed form,
without touching the implementation paths they check.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

from symplat.model import RV_DIMS


def waterfill_oracle(pool, demands):
    """Exact max-min fair shares as Fractions, by progressive filling.

    Raise the common water level until either the pool is exhausted or a
    demand saturates; saturated entries drop out and the level keeps rising
    for the rest.
    """
    n = len(demands)
    shares = [Fraction(0)] * n
    remaining = Fraction(pool)
    active = [i for i in range(n) if demands[i] > 0]
    while active and remaining > 0:
        step = min(
            min(Fraction(demands[i]) - shares[i] for i in active),
            remaining / len(active),
        )
        for i in active:
            shares[i] += step
        remaining -= step * len(active)
        active = [i for i in active if shares[i] < demands[i]]
    return shares


def alarm_oracle(stream, bc):
    """Replay a (t, value) stream against one boundary condition.

    Returns the list of timestamps at which an alarm fires. Windowed mean over
    trailing window_s seconds, edge-triggered, re-armed after a full window of
    continuous satisfaction.
    """
    fired = []
    armed = True
    satisfied_run_ms = 0
    history = []
    for t, value in stream:
        history.append((t, value))
        lo = t - bc.window_s * 1000
        window = [v for ts, v in history if lo < ts <= t]
        mean = sum(window) / len(window)
        violated = mean < bc.threshold if bc.bound == "min" else mean > bc.threshold
        if violated:
            if armed:
                fired.append(t)
                armed = False
            satisfied_run_ms = 0
        else:
            if not armed:
                satisfied_run_ms += 1000
                if satisfied_run_ms >= bc.window_s * 1000:
                    armed = True
                    satisfied_run_ms = 0
    return fired


def brute_force_placement(node_ids, capacities, per_task, task_count):
    """Lexicographically smallest feasible task -> node map, or None.

    Enumerates every assignment in node-id order; feasible iff per-node sums
    fit capacity in all dimensions. Exponential: keep task_count small.
    """
    for combo in itertools.product(node_ids, repeat=task_count):
        ok = True
        for nid in set(combo):
            count = combo.count(nid)
            for d in RV_DIMS:
                if getattr(per_task, d) * count > getattr(capacities[nid], d):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return {tid: combo[tid] for tid in range(task_count)}
    return None
