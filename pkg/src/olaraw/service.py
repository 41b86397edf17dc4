"""HTTP control service: submit queries, stream estimate events, steer.

Endpoints
  POST /queries                 {sql, file, epsilon?, delta_ms?, strategy?, threads?, seed?} -> {id}
  GET  /queries/{id}            run summary
  GET  /queries/{id}/events     server-sent events; one `snapshot` event per
                                EstimateSnapshot (data = the trace line),
                                then one `terminal` event (data = state)
  POST /queries/{id}/stop       -> {state}; 409 with the terminal state if
                                the run already ended
  GET  /files                   datasets in the data directory + index status
  GET  /synopsis                cached-sample summaries per file

The event payload is byte-identical to the CLI trace line, so both
consumers share one schema. Static files from a `dist` directory next to
the server (the dashboard build) are served at / when present.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .cli import load_dataset
from .controller import QueryController, RunState
from .pipeline import PipelineConfig
from .query import QuerySyntaxError, UnknownColumnError, parse_query
from .store import RawStoreError
from .strategies import StrategyKind
from .synopsis import Synopsis


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    data_dir: str = "."
    default_threads: int = 4
    default_epsilon: float = 0.05
    default_delta_ms: float = 1000.0
    default_confidence: float = 0.95
    synopsis_budget_mb: float = 32.0
    static_dir: Optional[str] = None


@dataclass
class RunHandle:
    run_id: str
    controller: QueryController
    thread: threading.Thread
    events: list[tuple[str, str]] = field(default_factory=list)  # (event name, data)
    cond: threading.Condition = field(default_factory=threading.Condition)
    done: bool = False

    def append(self, name: str, data: str) -> None:
        with self.cond:
            self.events.append((name, data))
            if name == "terminal":
                self.done = True
            self.cond.notify_all()

    def summary(self) -> dict:
        run = self.controller.run
        f = run.final_snapshot
        return {
            "id": self.run_id,
            "state": run.state,
            "strategy": run.strategy.value,
            "sql": run.query.to_sql(),
            "epsilon": run.query.epsilon,
            "delta_ms": run.query.delta_ms,
            "snapshots": len(run.snapshots),
            "chunks_read": run.chunks_read,
            "tuples_extracted": run.tuples_extracted,
            "estimate": None if f is None else f.tau_hat,
            "error_ratio": None if f is None else f.error_ratio,
            "tainted": run.tainted,
        }


class ServiceState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.runs: dict[str, RunHandle] = {}
        self.synopses: dict[str, Synopsis] = {}
        self.lock = threading.Lock()

    def _synopsis_for(self, file: str, columns: tuple[str, ...]) -> Synopsis:
        with self.lock:
            syn = self.synopses.get(file)
            if syn is None:
                row_bytes = 8 * max(len(columns), 1)
                syn = Synopsis(
                    budget_tuples=int(self.config.synopsis_budget_mb * 2**20) // row_bytes,
                    columns=columns,
                    file_path=file,
                    origin_schedule=[],
                )
                self.synopses[file] = syn
            return syn

    def start_query(self, body: dict) -> RunHandle:
        file = body.get("file")
        if not file:
            raise ValueError("missing 'file'")
        path = str(Path(self.config.data_dir) / file)
        index, schema = load_dataset(path)
        q = parse_query(
            body["sql"],
            schema_columns=list(schema.names),
            epsilon=float(body.get("epsilon", self.config.default_epsilon)),
            delta_ms=float(body.get("delta_ms", body.get("delta", self.config.default_delta_ms))),
            confidence=float(body.get("confidence", self.config.default_confidence)),
        )
        strategy = StrategyKind.parse(body.get("strategy", "resource"))
        cfg = PipelineConfig(
            threads=int(body.get("threads", self.config.default_threads)),
            buffer_capacity=int(body.get("buffer", 4)),
            per_tuple_cost=float(body.get("per_tuple_cost", 0.0)),
            seed=int(body.get("seed", 0)),
        )
        synopsis = self._synopsis_for(index.path, q.columns)
        run_id = uuid.uuid4().hex[:12]
        handle: RunHandle

        def on_snapshot(snapshot, line):
            handle.append("snapshot", line)

        ctl = QueryController(index, schema, q, strategy, cfg, synopsis, on_snapshot=on_snapshot)

        def work():
            run = ctl.execute()
            handle.append("terminal", run.state)

        th = threading.Thread(target=work, daemon=True, name=f"query-{run_id}")
        handle = RunHandle(run_id=run_id, controller=ctl, thread=th)
        with self.lock:
            self.runs[run_id] = handle
        th.start()
        return handle

    def files(self) -> list[dict]:
        base = Path(self.config.data_dir)
        out = []
        if not base.is_dir():
            return out
        for f in sorted(base.iterdir()):
            if f.suffix in (".csv", ".bin") and f.is_file():
                entry = {"name": f.name, "bytes": f.stat().st_size, "indexed": (base / (f.name + ".idx")).exists()}
                if entry["indexed"]:
                    try:
                        from .store import ChunkIndex

                        idx = ChunkIndex.load(str(f) + ".idx", data_path=str(f))
                        entry["chunks"] = idx.n_chunks
                        entry["tuples"] = idx.total_tuples
                    except RawStoreError:
                        entry["indexed"] = False
                out.append(entry)
        return out


class _Handler(BaseHTTPRequestHandler):
    state: ServiceState  # class attribute injected by serve()
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # ------------------------------------------------------------- helpers

    def _json(self, code: int, payload: dict | list) -> None:
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        n = int(self.headers.get("Content-Length") or 0)
        if n == 0:
            return {}
        return json.loads(self.rfile.read(n).decode())

    def _run_or_404(self, run_id: str) -> Optional[RunHandle]:
        handle = self.state.runs.get(run_id)
        if handle is None:
            self._json(404, {"error": f"unknown query id {run_id!r}"})
        return handle

    # ------------------------------------------------------------ routing

    def do_GET(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts == ["files"]:
            return self._json(200, self.state.files())
        if parts == ["synopsis"]:
            return self._json(200, {f: s.summary() for f, s in self.state.synopses.items()})
        if len(parts) == 2 and parts[0] == "queries":
            handle = self._run_or_404(parts[1])
            if handle:
                self._json(200, handle.summary())
            return
        if len(parts) == 3 and parts[0] == "queries" and parts[2] == "events":
            handle = self._run_or_404(parts[1])
            if handle:
                self._stream_events(handle)
            return
        return self._static(parts)

    def do_POST(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts == ["queries"]:
            try:
                body = self._read_body()
                handle = self.state.start_query(body)
            except (QuerySyntaxError, UnknownColumnError, RawStoreError, ValueError, KeyError, FileNotFoundError) as exc:
                return self._json(400, {"error": str(exc)})
            return self._json(200, {"id": handle.run_id})
        if len(parts) == 3 and parts[0] == "queries" and parts[2] == "stop":
            handle = self._run_or_404(parts[1])
            if handle is None:
                return
            run = handle.controller.run
            if run.state in RunState.TERMINAL:
                return self._json(409, {"state": run.state})
            handle.controller.stop()
            handle.thread.join(timeout=max(run.query.delta_ms / 1000.0 * 4, 2.0))
            return self._json(200, {"state": handle.controller.run.state})
        return self._json(404, {"error": "no such endpoint"})

    # --------------------------------------------------------------- SSE

    def _stream_events(self, handle: RunHandle) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Connection", "close")
        self.end_headers()
        i = 0
        try:
            while True:
                with handle.cond:
                    while i >= len(handle.events) and not handle.done:
                        handle.cond.wait(timeout=1.0)
                    batch = handle.events[i:]
                    i = len(handle.events)
                    finished = handle.done and i >= len(handle.events)
                for name, data in batch:
                    self.wfile.write(f"event: {name}\ndata: {data}\n\n".encode())
                self.wfile.flush()
                if finished:
                    break
        except (BrokenPipeError, ConnectionResetError):
            pass

    # ------------------------------------------------------------- static

    def _static(self, parts: list[str]) -> None:
        root = self.state.config.static_dir
        if root is None:
            return self._json(404, {"error": "no such endpoint"})
        rel = "index.html" if not parts else "/".join(parts)
        f = (Path(root) / rel).resolve()
        if not str(f).startswith(str(Path(root).resolve())) or not f.is_file():
            return self._json(404, {"error": "no such endpoint"})
        ctype = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
        }.get(f.suffix, "application/octet-stream")
        body = f.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_server(config: ServiceConfig) -> ThreadingHTTPServer:
    state = ServiceState(config)
    handler = type("BoundHandler", (_Handler,), {"state": state})
    httpd = ThreadingHTTPServer((config.host, config.port), handler)
    httpd.daemon_threads = True
    httpd.state = state  # type: ignore[attr-defined]
    return httpd


def serve(config: ServiceConfig) -> None:
    if config.static_dir is None:
        guess = Path(__file__).resolve().parents[3] / "frontend" / "dist"
        if guess.is_dir():
            config.static_dir = str(guess)
    httpd = make_server(config)
    print(f"listening on http://{config.host}:{httpd.server_address[1]} data_dir={config.data_dir}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.shutdown()
