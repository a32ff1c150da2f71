"""Transformer classifier with the capabilities the wire protocol serves.

Wraps a binary sequence classifier plus an LM head that shares the
classifier's encoder, so token proposals come from the same latent space the
optimization runs in. A deterministic tiny-model shim (random weights, word
tokenizer, no network access) makes the whole surface testable in CI.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch
from torch import nn
from transformers import BertConfig, BertForSequenceClassification

UNK_ID = 0
_WORD_RE = re.compile(r"\w+|[^\w\s]")

SHIM_WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "zonk", "zap", "zip",
]


class WordTokenizer:
    """Lowercased word/punctuation tokenizer over a fixed list; id 0 is unknown.

    Inputs are not wrapped in classifier markup tokens, so every position of
    an encoded sequence is a substitutable text token.
    """

    def __init__(self, words: list[str]):
        self.tokens = ["[unk]"] + list(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in _WORD_RE.findall(text.lower())]

    def decode_tokens(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


class BridgeModel:
    """Classifier + LM-head capabilities behind the wire protocol."""

    def __init__(self, classifier, tokenizer, heads: dict[str, nn.Module],
                 head_mode: str = "pretrained", step_size: float = 0.5, l1: float = 0.01,
                 device: str = "cpu", ppl_model=None, padded_batching: bool = False):
        if head_mode not in heads:
            raise ValueError(f"unknown head mode {head_mode!r}; have {sorted(heads)}")
        self.classifier = classifier.to(device).eval()
        self.tokenizer = tokenizer
        self.heads = {name: head.to(device).eval() for name, head in heads.items()}
        self.head_mode = head_mode
        self.step_size = step_size
        self.l1 = l1
        self.device = device
        self.ppl_model = ppl_model.to(device).eval() if ppl_model is not None else None
        self.padded_batching = padded_batching

    # -- construction ---------------------------------------------------------

    @classmethod
    def shim(cls, seed: int = 0, hidden: int = 32, layers: int = 2,
             step_size: float = 0.5, l1: float = 0.01) -> "BridgeModel":
        """A deterministic randomly initialized tiny classifier; no downloads."""
        tokenizer = WordTokenizer(SHIM_WORDS)
        config = BertConfig(
            vocab_size=tokenizer.vocab_size,
            hidden_size=hidden,
            num_hidden_layers=layers,
            num_attention_heads=4,
            intermediate_size=2 * hidden,
            max_position_embeddings=128,
            num_labels=2,
        )
        torch.manual_seed(seed)
        classifier = BertForSequenceClassification(config)
        torch.manual_seed(seed + 1)
        pretrained_head = nn.Linear(hidden, tokenizer.vocab_size)
        return cls(classifier, tokenizer, {"pretrained": pretrained_head},
                   step_size=step_size, l1=l1)

    @classmethod
    def from_pretrained(cls, model_path: str, head_mode: str = "pretrained",
                        retrained_head_path: str | None = None,
                        step_size: float = 0.5, l1: float = 0.01,
                        device: str = "cpu", ppl_model_path: str | None = None) -> "BridgeModel":
        """Load a fine-tuned sequence classifier and its LM head from local or
        hub artifacts. The pretrained head comes from the masked-LM variant of
        the same architecture; a retrained head comes from a saved fit."""
        from transformers import AutoModelForMaskedLM, AutoModelForSequenceClassification, AutoTokenizer

        classifier = AutoModelForSequenceClassification.from_pretrained(model_path)
        tokenizer = AutoTokenizer.from_pretrained(model_path)
        heads: dict[str, nn.Module] = {}
        mlm = AutoModelForMaskedLM.from_pretrained(model_path)
        heads["pretrained"] = _mlm_head_of(mlm)
        if retrained_head_path:
            heads["retrained"] = load_head(retrained_head_path)
        ppl_model = None
        if ppl_model_path:
            from transformers import AutoModelForCausalLM

            ppl_model = AutoModelForCausalLM.from_pretrained(ppl_model_path)
        return cls(classifier, _HfTokenizerAdapter(tokenizer), heads, head_mode=head_mode,
                   step_size=step_size, l1=l1, device=device, ppl_model=ppl_model)

    def with_head(self, name: str, head: nn.Module):
        self.heads[name] = head.to(self.device).eval()
        return self

    # -- capabilities ----------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    @property
    def encoder(self):
        return self.classifier.base_model

    @property
    def head(self) -> nn.Module:
        return self.heads[self.head_mode]

    def _check_ids(self, ids):
        ids = [int(i) for i in ids]
        if not ids:
            raise ValueError("empty id sequence")
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ValueError("token id out of range")
        return ids

    def _p1_from_logits(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.softmax(logits, dim=-1)[..., 1]

    @torch.no_grad()
    def predict_ids(self, ids) -> float:
        ids = self._check_ids(ids)
        batch = torch.tensor([ids], device=self.device)
        logits = self.classifier(input_ids=batch).logits
        return float(self._p1_from_logits(logits)[0])

    @torch.no_grad()
    def predict_batch(self, batch) -> list[float]:
        """Scores for many sequences in one protocol round trip.

        Each row runs through the exact single-sequence forward by default,
        keeping batch results bit-identical to individual predictions; padded
        batching (faster on accelerators, not bit-stable) is opt-in.
        """
        if not batch:
            return []
        rows = [self._check_ids(ids) for ids in batch]
        if not self.padded_batching:
            return [self.predict_ids(row) for row in rows]
        width = max(len(r) for r in rows)
        input_ids = torch.zeros((len(rows), width), dtype=torch.long, device=self.device)
        mask = torch.zeros((len(rows), width), dtype=torch.long, device=self.device)
        for i, row in enumerate(rows):
            input_ids[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = 1
        logits = self.classifier(input_ids=input_ids, attention_mask=mask).logits
        return [float(p) for p in self._p1_from_logits(logits)]

    def saliency(self, ids) -> list[float]:
        ids = self._check_ids(ids)
        emb = self.classifier.get_input_embeddings()
        E = emb(torch.tensor([ids], device=self.device)).detach().requires_grad_(True)
        p1 = self._p1_from_logits(self.classifier(inputs_embeds=E).logits)[0]
        p1.backward()
        scores = ((E.grad * E.detach()) ** 2).sum(dim=-1)[0]
        return [float(s) for s in scores]

    def _lm_logit_matrix(self, E: torch.Tensor) -> np.ndarray:
        """Per-position vocabulary logits (n, |V|) for an embedding batch of one."""
        hidden = self.encoder(inputs_embeds=E).last_hidden_state
        return self.head(hidden)[0].detach().cpu().numpy()

    def propose(self, ids, target: int, k: int) -> list[list[int]]:
        """Optimize the input embeddings toward *target* for *k* proximal steps
        and accumulate one candidate per step per position from the LM head,
        excluding the original and unknown tokens."""
        ids = self._check_ids(ids)
        if target not in (0, 1):
            raise ValueError("target must be 0 or 1")
        if k < 1:
            raise ValueError("k must be at least 1")
        emb = self.classifier.get_input_embeddings()
        E0 = emb(torch.tensor([ids], device=self.device)).detach()
        current = E0.clone()
        matrices = []
        for _ in range(k):
            E_var = current.clone().requires_grad_(True)
            p1 = self._p1_from_logits(self.classifier(inputs_embeds=E_var).logits)[0]
            p_target = p1 if target == 1 else 1.0 - p1
            loss = -torch.log(p_target.clamp_min(1e-12))
            loss.backward()
            with torch.no_grad():
                moved = E_var - self.step_size * E_var.grad
                disp = moved - E0
                disp = torch.sign(disp) * (disp.abs() - self.step_size * self.l1).clamp_min(0.0)
                current = (E0 + disp).detach()
            matrices.append(self._lm_logit_matrix(current))
        return _accumulate_candidates(matrices, ids, self.vocab_size, k)

    @torch.no_grad()
    def perplexity(self, ids) -> float:
        """Exponentiated language-modeling loss. With a causal scorer attached
        this is its true perplexity; otherwise the shared-encoder LM head
        scores each position (a pseudo-perplexity, same contract)."""
        ids = self._check_ids(ids)
        batch = torch.tensor([ids], device=self.device)
        if self.ppl_model is not None:
            out = self.ppl_model(input_ids=batch, labels=batch)
            return float(torch.exp(out.loss))
        hidden = self.encoder(input_ids=batch).last_hidden_state
        logits = self.heads["pretrained"](hidden)[0]
        loss = nn.functional.cross_entropy(logits, batch[0])
        return float(torch.exp(loss))

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def tokens(self, ids) -> list[str]:
        return self.tokenizer.decode_tokens(self._check_ids(ids))


def _accumulate_candidates(matrices, original_ids, vocab_size: int, k: int) -> list[list[int]]:
    n = len(original_ids)
    capacity = max(0, vocab_size - 2)
    out: list[list[int]] = [[] for _ in range(n)]
    taken = [{original_ids[t], UNK_ID} for t in range(n)]
    for mat in matrices[:k]:
        for t in range(n):
            if len(out[t]) >= capacity:
                continue
            col = mat[t].copy()
            col[list(taken[t])] = -np.inf
            best = int(np.argmax(col))
            if not np.isfinite(col[best]):
                continue
            out[t].append(best)
            taken[t].add(best)
    return out


class _HfTokenizerAdapter:
    """Adapts a hub tokenizer to the bridge's tokenizer surface."""

    def __init__(self, tokenizer):
        self.tokenizer = tokenizer

    @property
    def vocab_size(self) -> int:
        return len(self.tokenizer)

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text, add_special_tokens=False)

    def decode_tokens(self, ids) -> list[str]:
        return self.tokenizer.convert_ids_to_tokens(list(ids))


def _mlm_head_of(mlm_model) -> nn.Module:
    for attr in ("cls", "lm_head", "vocab_projector"):
        if hasattr(mlm_model, attr):
            return getattr(mlm_model, attr)
    raise ValueError("cannot locate the LM head on the masked-LM model")


def save_head(path: str | Path, head: nn.Linear):
    payload = {
        "state_dict": head.state_dict(),
        "in_features": head.in_features,
        "out_features": head.out_features,
    }
    torch.save(payload, path)


def load_head(path: str | Path) -> nn.Linear:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    head = nn.Linear(payload["in_features"], payload["out_features"])
    head.load_state_dict(payload["state_dict"])
    return head


def read_jsonl_texts(path: str | Path) -> list[tuple[str, int]]:
    """(text, label) rows of the shared dataset format."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            obj = json.loads(raw)
            if "text" not in obj or "label" not in obj:
                raise ValueError(f"{path}:{lineno}: expected 'text' and 'label'")
            rows.append((obj["text"], int(obj["label"])))
    if not rows:
        raise ValueError(f"{path}: no examples")
    return rows
