import http.client
import json
import os
import threading
import time

import pytest

from olaraw import store
from olaraw.service import ServiceConfig, make_server


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    d = tmp_path_factory.mktemp("svc")
    path = str(d / "demo.csv")
    schema = store.generate_synthetic(path, tuples=16 * 1024, columns=4, seed=5)
    store.build_chunk_index(path, schema, target_chunk_bytes=max(os.path.getsize(path) // 16, 1))
    httpd = make_server(ServiceConfig(host="127.0.0.1", port=0, data_dir=str(d)))
    th = threading.Thread(target=httpd.serve_forever, daemon=True)
    th.start()
    yield "127.0.0.1", httpd.server_address[1]
    httpd.shutdown()


def req(addr, method, path, body=None, timeout=15):
    conn = http.client.HTTPConnection(*addr, timeout=timeout)
    conn.request(method, path, json.dumps(body) if body is not None else None,
                 {"Content-Type": "application/json"})
    r = conn.getresponse()
    data = r.read()
    conn.close()
    return r.status, json.loads(data) if data else None


def stream_events(addr, qid, timeout=30):
    conn = http.client.HTTPConnection(*addr, timeout=timeout)
    conn.request("GET", f"/queries/{qid}/events")
    resp = conn.getresponse()
    assert resp.getheader("Content-Type") == "text/event-stream"
    events = []
    buf = b""
    while True:
        chunk = resp.read1(65536)
        if not chunk:
            break
        buf += chunk
        while b"\n\n" in buf:
            raw, buf = buf.split(b"\n\n", 1)
            lines = raw.decode().splitlines()
            name = next(l[7:] for l in lines if l.startswith("event: "))
            data = next(l[6:] for l in lines if l.startswith("data: "))
            events.append((name, data))
        if events and events[-1][0] == "terminal":
            break
    conn.close()
    return events


def start(addr, **kw):
    body = {"sql": "SELECT SUM(a1) FROM t", "file": "demo.csv", "epsilon": 0.02,
            "delta_ms": 40, "strategy": "resource", "threads": 2}
    body.update(kw)
    st, r = req(addr, "POST", "/queries", body)
    assert st == 200, r
    return r["id"]


def test_files_endpoint(service):
    st, files = req(service, "GET", "/files")
    assert st == 200
    entry = next(f for f in files if f["name"] == "demo.csv")
    assert entry["indexed"] and entry["chunks"] == 16


def test_query_lifecycle_events_match_trace(service):
    qid = start(service, per_tuple_cost=0.00002)
    events = stream_events(service, qid)
    assert events[-1][0] == "terminal"
    assert events[-1][1] in ("SATISFIED", "EXACT_COMPLETE")
    snapshots = [e for e in events if e[0] == "snapshot"]
    assert snapshots
    for _, line in snapshots:
        assert line.startswith("timestamp_ms=")
    # no snapshot after terminal; stream is ordered like the trace
    assert [n for n, _ in events].index("terminal") == len(events) - 1
    st, summary = req(service, "GET", f"/queries/{qid}")
    assert st == 200 and summary["state"] == events[-1][1]
    assert summary["snapshots"] == len(snapshots)


def test_stop_endpoint_and_terminal_conflict(service):
    qid = start(service, epsilon=0.00001, per_tuple_cost=0.0003, threads=1, strategy="holistic")
    time.sleep(0.2)
    st, r = req(service, "POST", f"/queries/{qid}/stop")
    assert st == 200 and r["state"] == "STOPPED_BY_USER"
    st, r = req(service, "POST", f"/queries/{qid}/stop")
    assert st == 409 and r["state"] == "STOPPED_BY_USER"
    events = stream_events(service, qid)
    assert events[-1] == ("terminal", "STOPPED_BY_USER")


def test_unknown_id_404(service):
    assert req(service, "GET", "/queries/nope")[0] == 404
    assert req(service, "POST", "/queries/nope/stop")[0] == 404


def test_malformed_query_400(service):
    st, r = req(service, "POST", "/queries", {"sql": "SELECT FROM", "file": "demo.csv"})
    assert st == 400 and "error" in r
    st, _ = req(service, "POST", "/queries", {"sql": "SELECT SUM(a1) FROM t", "file": "missing.csv"})
    assert st == 400
    st, _ = req(service, "POST", "/queries", {"sql": "SELECT SUM(zz) FROM t", "file": "demo.csv"})
    assert st == 400


def test_warm_synopsis_second_run_reads_nothing(service):
    qid1 = start(service, seed=21)
    stream_events(service, qid1)
    qid2 = start(service, seed=21)
    events = stream_events(service, qid2)
    assert events[-1][1] in ("SATISFIED", "EXACT_COMPLETE")
    from olaraw.controller import parse_trace_line

    for name, line in events:
        if name == "snapshot":
            assert parse_trace_line(line)["chunks_read"] == 0
    st, syn = req(service, "GET", "/synopsis")
    assert st == 200 and len(syn) == 1


def test_event_stream_replays_history_after_completion(service):
    qid = start(service)
    first = stream_events(service, qid)
    again = stream_events(service, qid)
    assert first == again
