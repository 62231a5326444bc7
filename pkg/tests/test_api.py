import json
import socket

import pytest

from symplat.api import MAX_LINE_BYTES, WireClient, WireServer, parse_listen
from symplat.core import ApiError, PlatformCore
from symplat.model import (
    ApplicationSpec,
    EnvironmentImage,
    NodeSpec,
    Phase,
    ResourceVector,
)

GIB = 1 << 30

IMAGE = EnvironmentImage(image_id="img-1", name="solver", owner="team-a",
                         content_digest="sha256:abc")


def cluster():
    cap = ResourceVector(cpu_cores=32, memory_bytes=64 * GIB, fs_bps=500_000_000,
                         net_in_bps=10**9, net_out_bps=10**9, fs_iops=100_000,
                         storage_bytes=10**12)
    return [NodeSpec("n01", cap), NodeSpec("n02", cap)]


def app_spec(app_id="solver-1", cores=4, tasks=1, walltime=3600):
    return ApplicationSpec(
        app_id=app_id, kind="container", image="img-1", task_count=tasks,
        per_task_reservation=ResourceVector(cpu_cores=cores, memory_bytes=GIB),
        walltime_limit_s=walltime,
        trace=(Phase(kind="compute", work_amount=cores * walltime,
                     demand=ResourceVector(cpu_cores=cores), progress_at_end=1.0),),
    )


@pytest.fixture
def server():
    core = PlatformCore(cluster(), images=[IMAGE], mode="symmetric")
    srv = WireServer(core, "127.0.0.1:0").start()
    yield srv
    srv.stop()


def raw_connection(server):
    host, port = server.address.rsplit(":", 1)
    return socket.create_connection((host, int(port)), timeout=5.0)


def read_line(sock, buf=b""):
    while b"\n" not in buf:
        chunk = sock.recv(65536)
        if not chunk:
            return None, buf
        buf += chunk
    line, buf = buf.split(b"\n", 1)
    return json.loads(line.decode()), buf


class TestParseListen:
    def test_host_port(self):
        assert parse_listen("0.0.0.0:7077") == ("tcp", "0.0.0.0", 7077)

    def test_bare_port_defaults_host(self):
        assert parse_listen(":7077") == ("tcp", "127.0.0.1", 7077)

    def test_unix_path(self):
        assert parse_listen("/tmp/sock") == ("unix", "/tmp/sock", None)
        assert parse_listen("./relative.sock") == ("unix", "./relative.sock", None)


class TestHandshake:
    def test_hello_first_or_rejected(self, server):
        sock = raw_connection(server)
        sock.sendall(b'{"id": "x1", "op": "env_model", "payload": {}}\n')
        msg, buf = read_line(sock)
        assert msg["id"] == "x1"
        assert msg["error"]["code"] == "handshake_required"
        # the connection survives; hello then works
        sock.sendall(b'{"id": "x2", "op": "hello", "payload": {"tenant": "t", "operator": false}}\n')
        msg, buf = read_line(sock, buf)
        assert msg["result"] == {"tenant": "t", "operator": False}
        sock.close()

    def test_hello_binds_tenant(self, server):
        client = WireClient(server.address, tenant="alice")
        client.request("submit", {"spec": app_spec().to_json()})
        client.close()
        bob = WireClient(server.address, tenant="bob")
        with pytest.raises(ApiError) as err:
            bob.request("cancel", {"app_id": "solver-1"})
        assert err.value.code == "forbidden"
        bob.close()


class TestWireCodec:
    def test_malformed_line_keeps_connection(self, server):
        sock = raw_connection(server)
        sock.sendall(b'this is not json\n')
        msg, buf = read_line(sock)
        assert msg["id"] is None and msg["error"]["code"] == "malformed_message"
        sock.sendall(b'{"id": "h", "op": "hello", "payload": {}}\n')
        msg, buf = read_line(sock, buf)
        assert msg["id"] == "h" and "result" in msg
        sock.close()

    def test_non_object_is_malformed(self, server):
        sock = raw_connection(server)
        sock.sendall(b'[1, 2, 3]\n')
        msg, _ = read_line(sock)
        assert msg["error"]["code"] == "malformed_message"
        sock.close()

    def test_oversize_line_closes_connection(self, server):
        sock = raw_connection(server)
        big = b'{"id": "big", "op": "hello", "payload": {"tenant": "' \
              + b"x" * (MAX_LINE_BYTES + 10) + b'"}}\n'
        sock.sendall(big)
        msg, buf = read_line(sock)
        assert msg["error"]["code"] == "oversize_message"
        # server closes after reporting
        msg, _ = read_line(sock, buf)
        assert msg is None
        sock.close()

    def test_responses_exactly_once_and_correlated(self, server):
        sock = raw_connection(server)
        sock.sendall(b'{"id": "h", "op": "hello", "payload": {"tenant": "t"}}\n')
        lines = [
            json.dumps({"id": f"req-{i}", "op": "env_model", "payload": {}})
            for i in range(20)
        ]
        sock.sendall(("\n".join(lines) + "\n").encode())
        seen = []
        buf = b""
        for _ in range(21):
            msg, buf = read_line(sock, buf)
            seen.append(msg["id"])
        assert seen[0] == "h"
        assert seen[1:] == [f"req-{i}" for i in range(20)]  # in order, once each
        sock.close()


class TestOperations:
    def test_submit_status_roundtrip(self, server):
        client = WireClient(server.address, tenant="alice")
        res = client.request("submit", {"spec": app_spec().to_json()})
        assert res["reservation"]["app_id"] == "solver-1"
        status = client.request("status", {"app_id": "solver-1"})
        assert status["reservation"]["status"] == "Queued"
        client.close()

    def test_operator_ops_require_flag(self, server):
        client = WireClient(server.address, tenant="alice", operator=False)
        client.request("submit", {"spec": app_spec().to_json()})
        with pytest.raises(ApiError) as err:
            client.request("freeze_app", {"app_id": "solver-1"})
        assert err.value.code == "forbidden"
        client.close()

    def test_unknown_op(self, server):
        client = WireClient(server.address)
        with pytest.raises(ApiError) as err:
            client.request("warp_drive", {})
        assert err.value.code == "unknown_op"
        client.close()

    def test_unknown_image_rejected(self, server):
        client = WireClient(server.address)
        payload = app_spec().to_json()
        payload["image"] = "no-such-image"
        with pytest.raises(ApiError) as err:
            client.request("submit", {"spec": payload})
        assert err.value.code == "unknown_image"
        client.close()

    def test_error_state_is_terminal_over_the_wire(self, server):
        client = WireClient(server.address, tenant="alice")
        client.request("submit", {"spec": app_spec().to_json()})
        with server.core_lock:
            server.core.tick()  # activates the app
        client.request("set_logical_state", {"app_id": "solver-1", "state": "Error"})
        with pytest.raises(ApiError) as err:
            client.request("set_logical_state", {"app_id": "solver-1", "state": "Running"})
        assert err.value.code == "terminal_state"
        client.close()

    def test_physical_model_shape(self, server):
        client = WireClient(server.address, tenant="alice")
        client.request("submit", {"spec": app_spec(tasks=2).to_json()})
        with server.core_lock:
            server.core.tick()
            server.core.tick()
        out = client.request("physical_model", {"app_id": "solver-1"})
        assert len(out["tasks"]) == 2
        for task in out["tasks"]:
            assert set(task) >= {
                "t", "app_id", "task_id", "node_id", "cpu_cores_used",
                "memory_bytes_used", "fs_bps_used", "fs_iops_used",
                "storage_bytes_used", "net_in_bps_used", "net_out_bps_used",
                "interproc_bps_used",
            }
        client.close()


class TestPushes:
    def test_adjust_push_arrives_before_response(self, server):
        client = WireClient(server.address, tenant="alice")
        client.request("submit", {"spec": app_spec().to_json()})
        with server.core_lock:
            server.core.tick()
        client.request("subscribe_events", {"app_id": "solver-1"})
        res = client.request("adjust", {
            "app_id": "solver-1", "delta_per_task": {"cpu_cores": 4}})
        assert res["decision"] == "Granted"
        # the Adjusting push was already buffered while waiting for the response
        adjusting = [p for p in client.pushes
                     if p.get("push", {}).get("event") == "Adjusting"]
        assert len(adjusting) == 1
        assert adjusting[0]["push"]["detail"]["cpu_cores"] == 4
        client.close()

    def test_metric_pushes_flow_after_subscribe(self, server):
        client = WireClient(server.address, tenant="alice")
        client.request("submit", {"spec": app_spec().to_json()})
        client.request("subscribe_metrics", {"subject": {"kind": "app", "id": "solver-1"}})
        with server.core_lock:
            server.core.tick()
            server.core.tick()
        push = client.next_push()
        assert push["push"]["type"] == "sample"
        assert push["push"]["app_id"] == "solver-1"
        client.close()


class TestAsymmetricPolicy:
    def test_symmetric_only_ops_rejected(self):
        core = PlatformCore(cluster(), images=[IMAGE], mode="asymmetric")
        srv = WireServer(core, "127.0.0.1:0").start()
        try:
            client = WireClient(srv.address, tenant="alice")
            client.request("submit", {"spec": app_spec().to_json()})
            for op, payload in [
                ("adjust", {"app_id": "solver-1", "delta_per_task": {"cpu_cores": 1}}),
                ("register_boundary", {"bc_id": "b", "subject": {"kind": "app", "id": "x"},
                                       "metric": "cpu_cores_used", "bound": "max",
                                       "threshold": 1, "window_s": 1}),
                ("subscribe_metrics", {}),
                ("subscribe_events", {}),
            ]:
                with pytest.raises(ApiError) as err:
                    client.request(op, payload)
                assert err.value.code == "policy_disabled", op
            client.close()
        finally:
            srv.stop()
