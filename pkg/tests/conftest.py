import random
from pathlib import Path

import pytest

from cqforge.kg import KnowledgeGraph, Relation

DATA = Path(__file__).parent / "data"

GOLDEN_GRAPH = DATA / "golden_graph.tsv"
GOLDEN_CONFIG = DATA / "golden_config.yaml"

TIRED = "PersonX gets tired of it"
SKYDIVING = "PersonX goes skydiving"
NEW_THINGS = "to find new things to do"


def graph_of(*records) -> KnowledgeGraph:
    """Graph from (head, relation-name, tail[, score]) tuples."""
    return KnowledgeGraph.from_triples(
        (h, Relation.parse(r), t, *rest) for h, r, t, *rest in records
    )


@pytest.fixture
def skydiving_graph() -> KnowledgeGraph:
    return graph_of((TIRED, "xWant", NEW_THINGS), (SKYDIVING, "xIntent", NEW_THINGS))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


class JsonServer:
    """Local HTTP server answering POSTed JSON with ``handler(payload)``."""

    def __init__(self, handler):
        import json
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        outer = self
        self.requests = []

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append(body)
                status, reply = handler(body)
                data = json.dumps(reply).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def json_server():
    servers = []

    def start(handler):
        s = JsonServer(handler)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
