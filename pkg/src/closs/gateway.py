"""Classifier gateway: the four-capability backend interface the pipeline runs on.

Backends expose prediction, batched prediction, gradient saliency and
candidate proposal. The in-process backend wraps the bundled differentiable
classifier; the remote backend speaks newline-delimited JSON to a model
server over a stdio pipe or HTTP. Query accounting is client-side: forward
classifications and gradient passes are tracked in separate counters.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .candidates import CandidateProposal, generate_candidates, static_candidates
from .corpus import UNK_ID, TokenSequence, split_words
from .latent import optimize_embeddings
from .toy_model import (
    LMHead,
    ToyClassifier,
    forward_ids_batch,
    forward_from_embeddings,
    grad_score_wrt_embeddings,
    load_checkpoint,
)

SCORE_CLAMP = 1e-12


class TransportError(RuntimeError):
    """The remote backend is unreachable or the connection broke."""


class BackendError(RuntimeError):
    """The backend rejected a request."""


class UnsupportedCapabilityError(BackendError):
    """The backend does not implement the requested capability."""


@dataclass(frozen=True)
class ClassScore:
    """Probability of class 1, clamped strictly inside (0, 1)."""

    p1: float

    def __post_init__(self):
        if not 0.0 < self.p1 < 1.0:
            raise ValueError(f"p1 must be strictly inside (0, 1), got {self.p1}")

    @property
    def label(self) -> int:
        return 1 if self.p1 > 0.5 else 0


def clamp_score(p: float) -> float:
    return min(max(float(p), SCORE_CLAMP), 1.0 - SCORE_CLAMP)


@dataclass(frozen=True)
class SaliencyVector:
    scores: tuple[float, ...]

    def __post_init__(self):
        if any(s < 0 for s in self.scores):
            raise ValueError("saliency scores must be non-negative")

    def __len__(self) -> int:
        return len(self.scores)


class QueryCounter:
    """Thread-safe counters: one forward query per classified sequence, and a
    separate tally of gradient passes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward_queries = 0
        self.gradient_queries = 0

    def add_forward(self, m: int = 1):
        with self._lock:
            self.forward_queries += m

    def add_gradient(self, m: int = 1):
        with self._lock:
            self.gradient_queries += m


class Gateway:
    """Abstract backend. Subclasses implement the four capabilities; optional
    capabilities raise :class:`UnsupportedCapabilityError` by default."""

    counter: QueryCounter

    def predict(self, x: TokenSequence) -> ClassScore:
        raise NotImplementedError

    def predict_batch(self, xs: list[TokenSequence]) -> list[ClassScore]:
        raise NotImplementedError

    def saliency(self, x: TokenSequence) -> SaliencyVector:
        raise NotImplementedError

    def propose_candidates(self, x: TokenSequence, y_target: int, k: int) -> CandidateProposal:
        raise NotImplementedError

    def hotflip_scores(self, x: TokenSequence, y_target: int) -> np.ndarray:
        """First-order score-change estimates for every (position, token) pair,
        with invalid pairs at -inf. Needs direct embedding access."""
        raise UnsupportedCapabilityError("backend does not expose substitution score estimates")

    def proposal_variant(self, use_trajectory: bool | None = None, lm_head_mode: str | None = None) -> "Gateway":
        """A view of this backend with a different proposal pipeline. Remote
        backends return themselves: their pipeline is fixed server-side."""
        return self

    def encode_text(self, text: str) -> list[int]:
        raise NotImplementedError

    def token_string(self, token_id: int) -> str:
        raise NotImplementedError

    def fork(self) -> "Gateway":
        """A backend sharing this backend's model but with a fresh counter."""
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__

    def close(self):
        pass


class ToyBackend(Gateway):
    """In-process backend over the bundled differentiable classifier."""

    def __init__(
        self,
        model: ToyClassifier,
        retrained_head: LMHead,
        untrained_head: LMHead,
        step_size: float = 0.1,
        l1: float = 0.01,
        use_trajectory: bool = True,
        lm_head_mode: str = "retrained",
        counter: QueryCounter | None = None,
        description: str = "toy",
    ):
        if lm_head_mode not in ("retrained", "untrained"):
            raise ValueError(f"unknown lm_head_mode {lm_head_mode!r}")
        self.model = model
        self.retrained_head = retrained_head
        self.untrained_head = untrained_head
        self.step_size = step_size
        self.l1 = l1
        self.use_trajectory = use_trajectory
        self.lm_head_mode = lm_head_mode
        self.counter = counter or QueryCounter()
        self.description = description
        self.last_trajectory_steps: int | None = None

    @property
    def _head(self) -> LMHead:
        return self.retrained_head if self.lm_head_mode == "retrained" else self.untrained_head

    def predict(self, x: TokenSequence) -> ClassScore:
        p1 = forward_from_embeddings(self.model, self.model.embed(x.ids))
        self.counter.add_forward(1)
        return ClassScore(clamp_score(p1))

    def predict_batch(self, xs: list[TokenSequence]) -> list[ClassScore]:
        if not xs:
            return []
        scores = forward_ids_batch(self.model, [x.ids for x in xs])
        self.counter.add_forward(len(xs))
        return [ClassScore(clamp_score(p)) for p in scores]

    def saliency(self, x: TokenSequence) -> SaliencyVector:
        E = self.model.embed(x.ids)
        grad = grad_score_wrt_embeddings(self.model, E)
        self.counter.add_gradient(1)
        scores = np.sum((grad * E) ** 2, axis=1)
        return SaliencyVector(tuple(float(s) for s in scores))

    def propose_candidates(self, x: TokenSequence, y_target: int, k: int) -> CandidateProposal:
        if k < 1:
            raise ValueError("k must be at least 1")
        if y_target not in (0, 1):
            raise ValueError("y_target must be 0 or 1")
        if self.use_trajectory:
            traj = optimize_embeddings(self.model, x, y_target, k, self.step_size, self.l1)
            self.counter.add_gradient(k)
            self.last_trajectory_steps = k
            return generate_candidates(traj, self.model, self._head, x, k)
        self.last_trajectory_steps = 0
        return static_candidates(self.model, self._head, x, k)

    def hotflip_scores(self, x: TokenSequence, y_target: int) -> np.ndarray:
        E = self.model.embed(x.ids)
        grad = grad_score_wrt_embeddings(self.model, E)
        self.counter.add_gradient(1)
        if y_target == 0:
            grad = -grad
        # estimate[t, v] = g_t . (emb[v] - emb[x_t])
        scores = grad @ self.model.emb.T
        scores -= np.sum(grad * E, axis=1, keepdims=True)
        scores[np.arange(x.n), list(x.ids)] = -np.inf
        scores[:, UNK_ID] = -np.inf
        return scores

    def proposal_variant(self, use_trajectory: bool | None = None, lm_head_mode: str | None = None) -> "ToyBackend":
        variant = ToyBackend(
            self.model,
            self.retrained_head,
            self.untrained_head,
            step_size=self.step_size,
            l1=self.l1,
            use_trajectory=self.use_trajectory if use_trajectory is None else use_trajectory,
            lm_head_mode=self.lm_head_mode if lm_head_mode is None else lm_head_mode,
            counter=self.counter,
            description=self.description,
        )
        return variant

    def encode_text(self, text: str) -> list[int]:
        return [self.model.vocab.id_of(w) for w in split_words(text)]

    def token_string(self, token_id: int) -> str:
        return self.model.vocab.lookup(token_id)

    def fork(self) -> "ToyBackend":
        return ToyBackend(
            self.model,
            self.retrained_head,
            self.untrained_head,
            step_size=self.step_size,
            l1=self.l1,
            use_trajectory=self.use_trajectory,
            lm_head_mode=self.lm_head_mode,
            counter=QueryCounter(),
            description=self.description,
        )

    def describe(self) -> str:
        return self.description


class _StdioTransport:
    """Spawns a server command and exchanges one NDJSON line per request."""

    def __init__(self, command: str):
        self.command = command
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot start backend {command!r}: {exc}") from exc

    def request(self, payload: dict) -> dict:
        if self.proc.poll() is not None:
            raise TransportError(f"backend process exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(json.dumps(payload) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"backend pipe broken: {exc}") from exc
        if not line:
            raise TransportError("backend closed the stream")
        return json.loads(line)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class _HttpTransport:
    """POSTs one JSON request per call to a model server URL."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def request(self, payload: dict) -> dict:
        req = urllib.request.Request(
            self.url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"backend unreachable at {self.url}: {exc}") from exc

    def close(self):
        pass


class RemoteBackend(Gateway):
    """Wire-protocol client. Requests are serialized over one connection; the
    gradient counter tracks saliency calls only, since any gradient work done
    inside a remote proposal is invisible to the client."""

    def __init__(self, transport, description: str = "remote"):
        self.transport = transport
        self.counter = QueryCounter()
        self.description = description
        self._lock = threading.Lock()
        self._token_cache: dict[int, str] = {}

    def _request(self, payload: dict) -> dict:
        with self._lock:
            resp = self.transport.request(payload)
        if not isinstance(resp, dict) or "ok" not in resp:
            raise TransportError(f"malformed response: {resp!r}")
        if not resp["ok"]:
            raise BackendError(resp.get("error", "backend error"))
        return resp

    def predict(self, x: TokenSequence) -> ClassScore:
        resp = self._request({"op": "predict", "ids": list(x.ids)})
        self.counter.add_forward(1)
        return ClassScore(clamp_score(resp["p1"]))

    def predict_batch(self, xs: list[TokenSequence]) -> list[ClassScore]:
        if not xs:
            return []
        resp = self._request({"op": "predict_batch", "batch": [list(x.ids) for x in xs]})
        p1s = resp["p1s"]
        if len(p1s) != len(xs):
            raise TransportError(f"batch size mismatch: sent {len(xs)}, got {len(p1s)}")
        self.counter.add_forward(len(xs))
        return [ClassScore(clamp_score(p)) for p in p1s]

    def saliency(self, x: TokenSequence) -> SaliencyVector:
        resp = self._request({"op": "saliency", "ids": list(x.ids)})
        self.counter.add_gradient(1)
        return SaliencyVector(tuple(float(s) for s in resp["scores"]))

    def propose_candidates(self, x: TokenSequence, y_target: int, k: int) -> CandidateProposal:
        if k < 1:
            raise ValueError("k must be at least 1")
        resp = self._request({"op": "propose", "ids": list(x.ids), "target": y_target, "k": k})
        return CandidateProposal(per_position=tuple(tuple(c) for c in resp["candidates"]))

    def sequence_perplexity(self, ids) -> float:
        resp = self._request({"op": "ppl", "ids": list(ids)})
        return float(resp["ppl"])

    def encode_text(self, text: str) -> list[int]:
        resp = self._request({"op": "encode", "text": text})
        return [int(i) for i in resp["ids"]]

    def token_string(self, token_id: int) -> str:
        if token_id not in self._token_cache:
            resp = self._request({"op": "tokens", "ids": [token_id]})
            self._token_cache[token_id] = resp["tokens"][0]
        return self._token_cache[token_id]

    def fork(self) -> "RemoteBackend":
        twin = RemoteBackend.__new__(RemoteBackend)
        twin.transport = self.transport
        twin.counter = QueryCounter()
        twin.description = self.description
        twin._lock = self._lock
        twin._token_cache = self._token_cache
        return twin

    def describe(self) -> str:
        return self.description

    def close(self):
        self.transport.close()


def toy_backend_from_checkpoint(path: str, **kwargs) -> ToyBackend:
    model, retrained, untrained = load_checkpoint(path)
    kwargs.setdefault("description", f"ckpt:{path}")
    return ToyBackend(model, retrained, untrained, **kwargs)


def backend_from_uri(uri: str, **toy_kwargs) -> Gateway:
    """Resolve a backend URI: ``ckpt:<path>`` (or a bare path) loads the
    in-process model, ``jsonl-ipc:<command>`` spawns a wire server on a stdio
    pipe, ``http://...`` talks to a running one."""
    if uri.startswith("jsonl-ipc:"):
        return RemoteBackend(_StdioTransport(uri[len("jsonl-ipc:") :]), description=uri)
    if uri.startswith(("http://", "https://")):
        return RemoteBackend(_HttpTransport(uri), description=uri)
    if uri.startswith("http:"):
        rest = uri[len("http:") :]
        return RemoteBackend(_HttpTransport("http://" + rest.lstrip("/")), description=uri)
    path = uri[len("ckpt:") :] if uri.startswith("ckpt:") else uri
    return toy_backend_from_checkpoint(path, **toy_kwargs)
