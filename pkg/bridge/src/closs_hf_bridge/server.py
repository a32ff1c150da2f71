"""Newline-delimited JSON protocol server over a bridge model.

One request object per line (or per HTTP POST body), one response each, in
order. Failures answer in-band; protocol input never kills the process.
"""

from __future__ import annotations

import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .model import BridgeModel


def handle_request(model: BridgeModel, obj) -> dict:
    try:
        if not isinstance(obj, dict) or "op" not in obj:
            return {"ok": False, "error": "request must be an object with an 'op' field"}
        op = obj["op"]
        if op == "predict":
            return {"ok": True, "p1": model.predict_ids(obj["ids"])}
        if op == "predict_batch":
            return {"ok": True, "p1s": model.predict_batch(obj["batch"])}
        if op == "saliency":
            return {"ok": True, "scores": model.saliency(obj["ids"])}
        if op == "propose":
            return {"ok": True, "candidates": model.propose(obj["ids"], int(obj["target"]), int(obj["k"]))}
        if op == "ppl":
            return {"ok": True, "ppl": model.perplexity(obj["ids"])}
        if op == "encode":
            return {"ok": True, "ids": model.encode(str(obj["text"]))}
        if op == "tokens":
            return {"ok": True, "tokens": model.tokens(obj["ids"])}
        return {"ok": False, "error": f"unknown op {op!r}"}
    except Exception as exc:
        return {"ok": False, "error": str(exc)}


def serve_stdio(model: BridgeModel, stdin=None, stdout=None):
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
            resp = handle_request(model, obj)
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


def make_http_server(model: BridgeModel, host: str, port: int) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                obj = json.loads(self.rfile.read(length))
            except json.JSONDecodeError as exc:
                resp = {"ok": False, "error": f"malformed JSON: {exc.msg}"}
            else:
                resp = handle_request(model, obj)
            payload = json.dumps(resp).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def serve_http(model: BridgeModel, host: str, port: int):
    server = make_http_server(model, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
