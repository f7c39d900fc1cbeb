from __future__ import annotations

import json
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import pytest

from holosim.domain import SimConfig
from holosim.engine import run_simulation
from holosim.expcli.analyze import analyze
from holosim.expcli.grid import GridSpec, run_grid


@pytest.fixture(scope="session")
def default_run():
    return run_simulation(SimConfig(seed=42))


@dataclass
class GridResult:
    out: Any
    manifest: dict
    seconds: float


@pytest.fixture(scope="session")
def full_grid(tmp_path_factory) -> GridResult:
    out = tmp_path_factory.mktemp("grid")
    started = time.perf_counter()
    manifest = run_grid(GridSpec(), out, parallelism=4)
    return GridResult(out, manifest, time.perf_counter() - started)


@pytest.fixture(scope="session")
def full_bundle(full_grid, tmp_path_factory):
    return analyze(full_grid.out / "manifest.json", tmp_path_factory.mktemp("report"))


# scripted chat-completion stub


def envelope(content: Any) -> dict:
    if not isinstance(content, str):
        content = json.dumps(content)
    return {"id": "stub", "object": "chat.completion", "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}


@dataclass
class Reply:
    """``content`` goes inside a chat envelope (dicts as JSON text); ``raw`` replaces the whole body."""

    status: int = 200
    content: Any = None
    raw: str | None = None


@dataclass
class StubServer:
    """HTTP server answering POST /v1/chat/completions from a script.

    ``script`` is either a list of Reply (consumed in order, the last one
    repeats) or a callable taking the parsed request body.
    """

    script: list[Reply] | Callable[[dict], Reply] = field(default_factory=list)
    requests: list[dict] = field(default_factory=list)
    headers: list[dict] = field(default_factory=list)
    httpd: ThreadingHTTPServer | None = None

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def next_reply(self, body: dict) -> Reply:
        if callable(self.script):
            return self.script(body)
        k = min(len(self.requests) - 1, len(self.script) - 1)
        return self.script[k]


@pytest.fixture
def stub_server():
    stub = StubServer()
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            with lock:
                stub.requests.append(body)
                stub.headers.append(dict(self.headers))
                reply = stub.next_reply(body) if self.path == "/v1/chat/completions" else Reply(404, raw="no route")
            if reply.raw is not None:
                data = reply.raw.encode()
            elif reply.status == 200:
                data = json.dumps(envelope(reply.content)).encode()
            else:
                data = json.dumps({"error": {"code": reply.status}}).encode()
            self.send_response(reply.status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    stub.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=stub.httpd.serve_forever, args=(0.05,), daemon=True)
    thread.start()
    yield stub
    stub.httpd.shutdown()
    stub.httpd.server_close()


# acceptance result lines, printed again at the end of the session

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
