"""Self-contained differentiable text classifier with analytic gradients.

Architecture: token embeddings -> window-3 affine+tanh contextual encoder ->
mean pooling -> affine + logistic output. A separate affine projection from
the contextual states onto the vocabulary acts as a language-model head that
can be fit on a corpus or left at its random initialization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset, Vocab

CHECKPOINT_MAGIC = b"CLSM"
CHECKPOINT_VERSION = 1


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


class ToyClassifier:
    """Windowed tanh encoder + mean pooling + logistic output, all in float64."""

    def __init__(self, vocab: Vocab, emb, w_enc, b_enc, w_out, b_out):
        self.vocab = vocab
        self.emb = np.asarray(emb, dtype=np.float64)
        self.w_enc = np.asarray(w_enc, dtype=np.float64)  # (3d, d_h)
        self.b_enc = np.asarray(b_enc, dtype=np.float64)
        self.w_out = np.asarray(w_out, dtype=np.float64)
        self.b_out = float(b_out)
        self.train_accuracy: float | None = None
        if self.emb.shape[0] != vocab.size:
            raise ValueError("embedding table does not match vocab size")
        if self.w_enc.shape[0] != 3 * self.dim:
            raise ValueError("encoder weight shape does not match embedding dim")

    @property
    def dim(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_enc.shape[1]

    def embed(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise ValueError("token id out of range")
        return self.emb[ids]


@dataclass
class LMHead:
    """Affine projection from contextual states to vocabulary logits."""

    w: np.ndarray  # (d_h, |V|)
    b: np.ndarray  # (|V|,)


def init_classifier(vocab: Vocab, dim: int = 16, hidden: int = 32, seed: int = 0) -> ToyClassifier:
    """Initialize all parameters uniformly in (-0.1, 0.1) from *seed*."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    emb = rng.uniform(-0.1, 0.1, size=(vocab.size, dim))
    w_enc = rng.uniform(-0.1, 0.1, size=(3 * dim, hidden))
    b_enc = rng.uniform(-0.1, 0.1, size=hidden)
    w_out = rng.uniform(-0.1, 0.1, size=hidden)
    b_out = rng.uniform(-0.1, 0.1)
    return ToyClassifier(vocab, emb, w_enc, b_enc, w_out, b_out)


def init_lm_head(model: ToyClassifier, seed: int = 0) -> LMHead:
    """Randomly initialized head; the stand-in for a head that was never fit."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C4D]))
    w = rng.uniform(-0.1, 0.1, size=(model.hidden, model.vocab.size))
    b = rng.uniform(-0.1, 0.1, size=model.vocab.size)
    return LMHead(w=w, b=b)


def _window3(E: np.ndarray) -> np.ndarray:
    """Stack [previous; current; next] embeddings per position, zero-padded at the ends."""
    prev = np.vstack([np.zeros((1, E.shape[1])), E[:-1]])
    nxt = np.vstack([E[1:], np.zeros((1, E.shape[1]))])
    return np.hstack([prev, E, nxt])


def encoder_states(model: ToyClassifier, E: np.ndarray) -> np.ndarray:
    """Contextual states H (n, d_h) for an embedding matrix E (n, d)."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != model.dim:
        raise ValueError(f"expected (n, {model.dim}) embeddings, got {E.shape}")
    return np.tanh(_window3(E) @ model.w_enc + model.b_enc)


def forward_from_embeddings(model: ToyClassifier, E: np.ndarray) -> float:
    """Classification score p(class 1) for an arbitrary embedding matrix."""
    H = encoder_states(model, E)
    a = H.mean(axis=0) @ model.w_out + model.b_out
    return float(_sigmoid(a))


def forward_ids_batch(model: ToyClassifier, ids_batch: list[tuple[int, ...]]) -> np.ndarray:
    """Scores for many token sequences.

    Runs each sequence through the exact single-sequence path so batched and
    individual evaluation agree bit for bit (a stacked-matmul variant does
    not: BLAS accumulation order differs between the 2-d and 3-d kernels).
    """
    return np.asarray([forward_from_embeddings(model, model.embed(ids)) for ids in ids_batch])


def _backward_embeddings(model: ToyClassifier, E: np.ndarray, upstream: float) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. E given d(loss)/d(pre-sigmoid activation)."""
    n = E.shape[0]
    X3 = _window3(E)
    H = np.tanh(X3 @ model.w_enc + model.b_enc)
    R = (upstream / n) * (1.0 - H ** 2) * model.w_out  # (n, d_h)
    G = R @ model.w_enc.T  # (n, 3d)
    d = model.dim
    g_prev, g_cur, g_next = G[:, :d], G[:, d : 2 * d], G[:, 2 * d :]
    dE = g_cur.copy()
    dE[:-1] += g_prev[1:]
    dE[1:] += g_next[:-1]
    return dE


def grad_wrt_embeddings(model: ToyClassifier, E: np.ndarray, target: int) -> np.ndarray:
    """Analytic gradient of the binary cross-entropy against *target* w.r.t. E."""
    E = np.asarray(E, dtype=np.float64)
    y_hat = forward_from_embeddings(model, E)
    return _backward_embeddings(model, E, y_hat - target)


def grad_score_wrt_embeddings(model: ToyClassifier, E: np.ndarray) -> np.ndarray:
    """Analytic gradient of the raw score p(class 1) w.r.t. E."""
    E = np.asarray(E, dtype=np.float64)
    y_hat = forward_from_embeddings(model, E)
    return _backward_embeddings(model, E, y_hat * (1.0 - y_hat))


def cross_entropy(p1: float, target: int) -> float:
    p1 = min(max(p1, 1e-12), 1.0 - 1e-12)
    return -(target * np.log(p1) + (1 - target) * np.log(1.0 - p1))


def train_classifier(
    data: Dataset,
    vocab: Vocab,
    epochs: int = 50,
    lr: float = 0.1,
    seed: int = 0,
    dim: int = 16,
    hidden: int = 32,
    batch_size: int = 32,
) -> ToyClassifier:
    """Fit the classifier by mini-batch SGD on mean binary cross-entropy.

    Deterministic given *seed*; the final training accuracy is stored on the
    returned model. Raises if the loss becomes non-finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    model = init_classifier(vocab, dim=dim, hidden=hidden, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x54524E]))
    examples = list(data.examples)
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), batch_size):
            batch = [examples[i] for i in order[start : start + batch_size]]
            g_emb = np.zeros_like(model.emb)
            g_w_enc = np.zeros_like(model.w_enc)
            g_b_enc = np.zeros_like(model.b_enc)
            g_w_out = np.zeros_like(model.w_out)
            g_b_out = 0.0
            batch_loss = 0.0
            for ex in batch:
                ids = np.asarray(ex.ids, dtype=np.intp)
                E = model.emb[ids]
                n = E.shape[0]
                X3 = _window3(E)
                H = np.tanh(X3 @ model.w_enc + model.b_enc)
                p = H.mean(axis=0)
                y_hat = _sigmoid(p @ model.w_out + model.b_out)
                batch_loss += cross_entropy(y_hat, ex.label)
                s = y_hat - ex.label
                g_w_out += s * p
                g_b_out += s
                R = (s / n) * (1.0 - H ** 2) * model.w_out
                g_b_enc += R.sum(axis=0)
                g_w_enc += X3.T @ R
                G = R @ model.w_enc.T
                d = model.dim
                dE = G[:, d : 2 * d].copy()
                dE[:-1] += G[1:, :d]
                dE[1:] += G[:-1, 2 * d :]
                np.add.at(g_emb, ids, dE)
            if not np.isfinite(batch_loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            scale = lr / len(batch)
            model.emb -= scale * g_emb
            model.w_enc -= scale * g_w_enc
            model.b_enc -= scale * g_b_enc
            model.w_out -= scale * g_w_out
            model.b_out -= scale * g_b_out
    preds = forward_ids_batch(model, [ex.ids for ex in examples])
    labels = np.asarray([ex.label for ex in examples])
    model.train_accuracy = float(np.mean((preds > 0.5).astype(int) == labels))
    return model


def retrain_lm_head(
    data: Dataset,
    model: ToyClassifier,
    seed: int = 0,
    epochs: int = 300,
    lr: float = 0.5,
) -> LMHead:
    """Fit the LM head by softmax regression: predict each token id from its
    contextual state under the trained encoder, over every position of *data*."""
    states = []
    targets = []
    for ex in data:
        E = model.embed(ex.ids)
        states.append(encoder_states(model, E))
        targets.extend(ex.ids)
    X = np.vstack(states)  # (N, d_h)
    y = np.asarray(targets, dtype=np.intp)
    head = init_lm_head(model, seed=seed)
    n_obs = X.shape[0]
    onehot = np.zeros((n_obs, model.vocab.size))
    onehot[np.arange(n_obs), y] = 1.0
    for epoch in range(epochs):
        logits = X @ head.w + head.b
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(probs[np.arange(n_obs), y] + 1e-300))
        if not np.isfinite(loss):
            raise RuntimeError(f"head fitting diverged at epoch {epoch}")
        delta = (probs - onehot) / n_obs
        head.w -= lr * (X.T @ delta)
        head.b -= lr * delta.sum(axis=0)
    return head


def lm_logits(model: ToyClassifier, head: LMHead, E: np.ndarray) -> np.ndarray:
    """Token logit matrix of shape (|V|, n): column t scores the vocabulary at position t."""
    H = encoder_states(model, E)
    return (H @ head.w + head.b).T


# --- checkpoint serialization -------------------------------------------------
#
# Layout: magic "CLSM", version u32, dims (|V|, d, d_h) as u32, a vocab string
# table (u32 count, then u32 byte-length + UTF-8 bytes per token), then the
# float64 little-endian parameter blocks in declared order:
# emb, w_enc, b_enc, w_out, b_out, retrained head (w, b), untrained head (w, b).


def _write_block(fh, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path: str | Path, model: ToyClassifier, retrained: LMHead, untrained: LMHead):
    """Write the model and both LM heads to a single binary file (bit-exact round-trip)."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<III", model.vocab.size, model.dim, model.hidden))
        fh.write(struct.pack("<I", model.vocab.size))
        for tok in model.vocab.tokens:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        _write_block(fh, model.emb)
        _write_block(fh, model.w_enc)
        _write_block(fh, model.b_enc)
        _write_block(fh, model.w_out)
        _write_block(fh, np.asarray([model.b_out]))
        for head in (retrained, untrained):
            _write_block(fh, head.w)
            _write_block(fh, head.b)


def load_checkpoint(path: str | Path) -> tuple[ToyClassifier, LMHead, LMHead]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        vsize, dim, hidden = struct.unpack("<III", fh.read(12))
        (ntok,) = struct.unpack("<I", fh.read(4))
        if ntok != vsize:
            raise ValueError(f"{path}: vocab table size mismatch")
        tokens = []
        for _ in range(ntok):
            (blen,) = struct.unpack("<I", fh.read(4))
            tokens.append(fh.read(blen).decode("utf-8"))
        vocab = Vocab(tokens)
        emb = _read_block(fh, (vsize, dim))
        w_enc = _read_block(fh, (3 * dim, hidden))
        b_enc = _read_block(fh, (hidden,))
        w_out = _read_block(fh, (hidden,))
        b_out = _read_block(fh, (1,))[0]
        model = ToyClassifier(vocab, emb, w_enc, b_enc, w_out, b_out)
        heads = []
        for _ in range(2):
            w = _read_block(fh, (hidden, vsize))
            b = _read_block(fh, (vsize,))
            heads.append(LMHead(w=w, b=b))
    return model, heads[0], heads[1]
