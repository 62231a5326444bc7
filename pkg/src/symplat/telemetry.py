"""Metric bus, ring-buffer series store, and boundary-condition analytics.

Publishing is one serialized pipeline: store, fan out to subscriptions, then
evaluate boundary conditions. Alarms are edge-triggered on the windowed mean
and re-arm only after a full window of continuous satisfaction.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

from .model import NODE_METRICS, SAMPLE_METRICS, NodeSample, PhysicalSample


class TelemetryError(Exception):
    code = "telemetry_error"

    def __init__(self, message=""):
        super().__init__(message or self.code)


class OutOfOrderSample(TelemetryError):
    code = "out_of_order_sample"


class EmptyRange(TelemetryError):
    code = "empty_range"


class UnknownSubject(TelemetryError):
    code = "unknown_subject"


class UnknownSubscription(TelemetryError):
    code = "unknown_subscription"


class InvalidBoundary(TelemetryError):
    code = "invalid_boundary"


@dataclass(frozen=True)
class BoundaryCondition:
    bc_id: str
    subject: tuple[str, str]  # ("app", app_id) | ("node", node_id)
    metric: str
    bound: str  # "min" | "max"
    threshold: int
    window_s: int
    subscriber: str | None = None

    def validate(self):
        if self.subject[0] not in ("app", "node"):
            raise InvalidBoundary(f"subject kind must be app or node, got {self.subject[0]!r}")
        if self.metric not in SAMPLE_METRICS + NODE_METRICS:
            raise InvalidBoundary(f"unknown metric {self.metric!r}")
        if self.bound not in ("min", "max"):
            raise InvalidBoundary(f"bound must be min or max, got {self.bound!r}")
        if self.threshold < 0:
            raise InvalidBoundary("threshold must be >= 0")
        if self.window_s < 1:
            raise InvalidBoundary("window_s must be >= 1")

    def to_json(self):
        return {
            "bc_id": self.bc_id,
            "subject": {"kind": self.subject[0], "id": self.subject[1]},
            "metric": self.metric,
            "bound": self.bound,
            "threshold": self.threshold,
            "window_s": self.window_s,
            "subscriber": self.subscriber,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            bc_id=obj["bc_id"],
            subject=(obj["subject"]["kind"], obj["subject"]["id"]),
            metric=obj["metric"],
            bound=obj["bound"],
            threshold=obj["threshold"],
            window_s=obj["window_s"],
            subscriber=obj.get("subscriber"),
        )


@dataclass(frozen=True)
class Alarm:
    bc_id: str
    subject: tuple[str, str]
    t: int
    observed: float
    threshold: int
    direction: str = "entered-violation"

    def to_json(self):
        return {
            "type": "alarm",
            "bc_id": self.bc_id,
            "subject": {"kind": self.subject[0], "id": self.subject[1]},
            "t": self.t,
            "observed": self.observed,
            "threshold": self.threshold,
            "direction": self.direction,
        }


class Subscription:
    """Bounded delivery channel: drop-oldest beyond `depth`, with gap markers.

    Pass a `sink` callable to bypass buffering (the caller then owns
    backpressure); otherwise messages accumulate until poll().
    """

    def __init__(self, sub_id, matcher, depth=1024, sink=None):
        self.sub_id = sub_id
        self.matcher = matcher
        self.depth = depth
        self.sink = sink
        self._buf = deque()
        self._gap = 0
        self.delivered = 0

    def deliver(self, msg):
        self.delivered += 1
        if self.sink is not None:
            self.sink(msg)
            return
        if len(self._buf) >= self.depth:
            self._buf.popleft()
            self._gap += 1
        self._buf.append(msg)

    def poll(self):
        out = []
        if self._gap:
            out.append({"type": "gap", "dropped": self._gap})
            self._gap = 0
        while self._buf:
            out.append(self._buf.popleft())
        return out


def _sample_subject(sample):
    if isinstance(sample, PhysicalSample):
        return ("app", sample.app_id)
    if isinstance(sample, NodeSample):
        return ("node", sample.node_id)
    raise TelemetryError(f"unsupported sample type {type(sample).__name__}")


@dataclass
class _BcState:
    in_violation: bool = False
    satisfied_since: int | None = None
    armed: bool = True


class MetricBus:
    def __init__(self, retention_s=3600, channel_depth=1024):
        self.retention_ms = retention_s * 1000
        self.channel_depth = channel_depth
        self.series: dict[tuple, deque] = {}  # (kind, id, metric) -> deque[(t, value)]
        self.subscriptions: dict[str, Subscription] = {}
        self.boundaries: dict[str, BoundaryCondition] = {}
        self._bc_state: dict[str, _BcState] = {}
        self.rejected_out_of_order = 0
        self.alarm_log: list[Alarm] = []
        self._sub_seq = itertools.count(1)
        self._known_subjects = set()

    # -- store -------------------------------------------------------------

    def _append(self, subject, metric, t, value):
        key = (subject[0], subject[1], metric)
        dq = self.series.setdefault(key, deque())
        if dq and t < dq[-1][0]:
            raise OutOfOrderSample(
                f"sample at {t} behind {dq[-1][0]} for {key}")
        dq.append((t, value))
        horizon = t - self.retention_ms
        while dq and dq[0][0] <= horizon:
            dq.popleft()

    def query(self, subject, metric, t0, t1):
        """Retained points with t in [t0, t1), time-ordered."""
        if not t0 < t1:
            raise EmptyRange(f"invalid range [{t0}, {t1})")
        if subject not in self._known_subjects:
            raise UnknownSubject(f"no samples ever published for {subject}")
        dq = self.series.get((subject[0], subject[1], metric), ())
        return [(t, v) for t, v in dq if t0 <= t < t1]

    # -- pub/sub -------------------------------------------------------------

    def subscribe(self, subject_kind=None, subject_id=None, metric=None, sink=None,
                  kinds=("sample", "node_sample", "alarm")):
        sub_id = f"sub-{next(self._sub_seq)}"

        def matcher(msg):
            if msg["type"] not in kinds:
                return False
            if msg["type"] == "alarm":
                subj = (msg["subject"]["kind"], msg["subject"]["id"])
            elif msg["type"] == "node_sample":
                subj = ("node", msg["node_id"])
            else:
                subj = ("app", msg["app_id"])
            if subject_kind is not None and subj[0] != subject_kind:
                return False
            if subject_id is not None and subj[1] != subject_id:
                return False
            return True

        sub = Subscription(sub_id, matcher, depth=self.channel_depth, sink=sink)
        self.subscriptions[sub_id] = sub
        return sub

    def unsubscribe(self, sub_id):
        if sub_id not in self.subscriptions:
            raise UnknownSubscription(f"no subscription {sub_id}")
        del self.subscriptions[sub_id]

    def _fan_out(self, msg):
        for sub_id in sorted(self.subscriptions):
            sub = self.subscriptions[sub_id]
            if sub.matcher(msg):
                sub.deliver(msg)

    # -- pipeline --------------------------------------------------------

    def publish(self, sample):
        """Store, fan out, evaluate; returns alarms raised by this sample."""
        subject = _sample_subject(sample)
        metrics = SAMPLE_METRICS if isinstance(sample, PhysicalSample) else NODE_METRICS
        for m in metrics:
            self._append(subject, m, sample.t, getattr(sample, m))
        self._known_subjects.add(subject)
        msg = sample.to_json()
        msg["type"] = "sample" if isinstance(sample, PhysicalSample) else "node_sample"
        self._fan_out(msg)
        return self.evaluate(sample, subject)

    # -- analytics ---------------------------------------------------------

    def register_boundary(self, bc):
        bc.validate()
        self.boundaries[bc.bc_id] = bc
        self._bc_state[bc.bc_id] = _BcState()
        return bc

    def drop_boundary(self, bc_id):
        if bc_id not in self.boundaries:
            raise InvalidBoundary(f"no boundary condition {bc_id}")
        del self.boundaries[bc_id]
        del self._bc_state[bc_id]

    def _window_mean(self, subject, metric, t, window_s):
        dq = self.series.get((subject[0], subject[1], metric), ())
        lo = t - window_s * 1000
        vals = [v for ts, v in dq if lo < ts <= t]
        if not vals:
            return None
        return sum(vals) / len(vals)

    def evaluate(self, sample, subject=None):
        if subject is None:
            subject = _sample_subject(sample)
        alarms = []
        for bc_id in sorted(self.boundaries):
            bc = self.boundaries[bc_id]
            if bc.subject != subject or not hasattr(sample, bc.metric):
                continue
            mean = self._window_mean(subject, bc.metric, sample.t, bc.window_s)
            if mean is None:
                continue
            violated = mean < bc.threshold if bc.bound == "min" else mean > bc.threshold
            st = self._bc_state[bc_id]
            if violated:
                if st.armed and not st.in_violation:
                    alarm = Alarm(bc_id=bc_id, subject=subject, t=sample.t,
                                  observed=mean, threshold=bc.threshold)
                    alarms.append(alarm)
                    self.alarm_log.append(alarm)
                    self._fan_out(alarm.to_json())
                    st.armed = False
                st.in_violation = True
                st.satisfied_since = None
            else:
                if st.in_violation or not st.armed:
                    if st.satisfied_since is None:
                        st.satisfied_since = sample.t
                    # one full window of satisfaction re-arms the condition
                    if sample.t - st.satisfied_since + 1000 >= bc.window_s * 1000:
                        st.armed = True
                        st.in_violation = False
                        st.satisfied_since = None
                else:
                    st.in_violation = False
        return alarms
