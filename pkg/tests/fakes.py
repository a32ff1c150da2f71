"""Hand-constructed backends with analytically known behavior."""

from __future__ import annotations

import numpy as np

from closs.corpus import TokenSequence
from closs.gateway import ClassScore, Gateway, QueryCounter, clamp_score


class AdditiveBackend(Gateway):
    """Score is the base plus an independent additive effect per replaced token.

    Effects are given per (location, token) pair; the caller constructs them
    so every reachable sum stays inside (0, 1). Coalition values under this
    backend are exactly additive, which makes Shapley orderings checkable by
    hand.
    """

    def __init__(self, original_ids: tuple[int, ...], base_p: float, effects: dict[tuple[int, int], float]):
        self.original_ids = tuple(original_ids)
        self.base_p = base_p
        self.effects = dict(effects)
        self.counter = QueryCounter()

    def _score(self, ids) -> float:
        p = self.base_p
        for t, tok in enumerate(ids):
            if tok != self.original_ids[t]:
                p += self.effects[(t, tok)]
        return p

    def predict(self, x: TokenSequence) -> ClassScore:
        self.counter.add_forward(1)
        return ClassScore(clamp_score(self._score(x.ids)))

    def predict_batch(self, xs):
        if not xs:
            return []
        self.counter.add_forward(len(xs))
        return [ClassScore(clamp_score(self._score(x.ids))) for x in xs]

    def fork(self):
        twin = AdditiveBackend(self.original_ids, self.base_p, self.effects)
        return twin


class LinearBackend(Gateway):
    """Score affine in the mean token embedding, so first-order substitution
    estimates equal the true score change exactly."""

    def __init__(self, emb: np.ndarray, weights: np.ndarray, bias: float, unk_id: int = 0):
        self.emb = np.asarray(emb, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.unk_id = unk_id
        self.counter = QueryCounter()

    def _score(self, ids) -> float:
        return float(self.weights @ self.emb[list(ids)].mean(axis=0) + self.bias)

    def predict(self, x: TokenSequence) -> ClassScore:
        self.counter.add_forward(1)
        return ClassScore(clamp_score(self._score(x.ids)))

    def predict_batch(self, xs):
        if not xs:
            return []
        self.counter.add_forward(len(xs))
        return [ClassScore(clamp_score(self._score(x.ids))) for x in xs]

    def hotflip_scores(self, x: TokenSequence, y_target: int) -> np.ndarray:
        self.counter.add_gradient(1)
        grad = self.weights / x.n  # d(p1)/d(e_t), identical at every position
        if y_target == 0:
            grad = -grad
        scores = np.tile(self.emb @ grad, (x.n, 1))
        scores -= scores[np.arange(x.n), list(x.ids)][:, None]
        scores[np.arange(x.n), list(x.ids)] = -np.inf
        scores[:, self.unk_id] = -np.inf
        return scores

    def fork(self):
        return LinearBackend(self.emb, self.weights, self.bias, self.unk_id)


class RecordingBackend(Gateway):
    """Delegates to a real backend while recording every evaluated id tuple."""

    def __init__(self, inner: Gateway):
        self.inner = inner
        self.counter = inner.counter
        self.predicted: list[tuple[int, ...]] = []
        self.batches: list[list[tuple[int, ...]]] = []

    def predict(self, x):
        self.predicted.append(x.ids)
        return self.inner.predict(x)

    def predict_batch(self, xs):
        self.batches.append([x.ids for x in xs])
        self.predicted.extend(x.ids for x in xs)
        return self.inner.predict_batch(xs)

    def saliency(self, x):
        return self.inner.saliency(x)

    def propose_candidates(self, x, y_target, k):
        return self.inner.propose_candidates(x, y_target, k)

    def hotflip_scores(self, x, y_target):
        return self.inner.hotflip_scores(x, y_target)

    def proposal_variant(self, **kwargs):
        return RecordingBackend(self.inner.proposal_variant(**kwargs))

    def token_string(self, token_id):
        return self.inner.token_string(token_id)

    def encode_text(self, text):
        return self.inner.encode_text(text)
