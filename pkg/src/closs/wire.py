"""Newline-delimited JSON model server for the in-process backend.

One request object per line, one response per request, in order. Malformed
or failing requests produce an in-band error response; the process never
dies on protocol input. The same dispatch serves a stdio pipe and an HTTP
POST endpoint.
"""

from __future__ import annotations

import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .corpus import TokenSequence
from .evaluation import perplexity
from .gateway import Gateway


def _sequence(ids) -> TokenSequence:
    return TokenSequence(ids=tuple(int(i) for i in ids), raw_text="", label=0)


def handle_request(backend: Gateway, obj, scorer=None) -> dict:
    """Dispatch one decoded request object to the backend."""
    try:
        if not isinstance(obj, dict) or "op" not in obj:
            return {"ok": False, "error": "request must be an object with an 'op' field"}
        op = obj["op"]
        if op == "predict":
            return {"ok": True, "p1": backend.predict(_sequence(obj["ids"])).p1}
        if op == "predict_batch":
            scores = backend.predict_batch([_sequence(ids) for ids in obj["batch"]])
            return {"ok": True, "p1s": [s.p1 for s in scores]}
        if op == "saliency":
            return {"ok": True, "scores": list(backend.saliency(_sequence(obj["ids"])).scores)}
        if op == "propose":
            proposal = backend.propose_candidates(_sequence(obj["ids"]), int(obj["target"]), int(obj["k"]))
            return {"ok": True, "candidates": [list(c) for c in proposal.per_position]}
        if op == "encode":
            return {"ok": True, "ids": backend.encode_text(str(obj["text"]))}
        if op == "tokens":
            return {"ok": True, "tokens": [backend.token_string(int(i)) for i in obj["ids"]]}
        if op == "ppl":
            if scorer is None:
                return {"ok": False, "error": "perplexity scoring not configured on this server"}
            return {"ok": True, "ppl": perplexity([int(i) for i in obj["ids"]], scorer)}
        return {"ok": False, "error": f"unknown op {op!r}"}
    except Exception as exc:  # protocol errors are data, not crashes
        return {"ok": False, "error": str(exc)}


def serve_stdio(backend: Gateway, scorer=None, stdin=None, stdout=None):
    """Answer requests from *stdin* until it closes."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            resp = {"ok": False, "error": f"malformed JSON: {exc.msg}"}
        else:
            resp = handle_request(backend, obj, scorer)
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


def make_http_server(backend: Gateway, host: str, port: int, scorer=None) -> ThreadingHTTPServer:
    """An HTTP server answering one protocol request per POST body."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length)
            try:
                obj = json.loads(body)
            except json.JSONDecodeError as exc:
                resp = {"ok": False, "error": f"malformed JSON: {exc.msg}"}
            else:
                resp = handle_request(backend, obj, scorer)
            payload = json.dumps(resp).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def serve_http(backend: Gateway, host: str, port: int, scorer=None):
    server = make_http_server(backend, host, port, scorer)
    try:
        server.serve_forever()
    finally:
        server.server_close()
