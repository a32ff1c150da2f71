"""Dataset ingestion, word-level tokenization, vocabulary management and token edits."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

UNK_TOKEN = "<unk>"
UNK_ID = 0

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens."""
    return _WORD_RE.findall(text.lower())


class Vocab:
    """Fixed token inventory with contiguous ids; id 0 is reserved for unknowns."""

    def __init__(self, tokens: list[str]):
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValueError("vocab must start with the reserved unknown token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.index: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def lookup(self, token_id: int) -> str:
        return self.tokens[token_id]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"Vocab(size={self.size})"


def build_vocab(corpus: list[str], max_size: int, min_freq: int = 1) -> Vocab:
    """Build a vocabulary of the most frequent tokens in *corpus*.

    Keeps the ``max_size - 1`` most frequent tokens meeting *min_freq* (ties
    broken lexicographically) plus the reserved unknown token at id 0.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if max_size < 2:
        raise ValueError("max_size must be at least 2")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(split_words(text))
    eligible = [(tok, c) for tok, c in counts.items() if c >= min_freq]
    eligible.sort(key=lambda item: (-item[1], item[0]))
    kept = [tok for tok, _ in eligible[: max_size - 1]]
    return Vocab([UNK_TOKEN] + kept)


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized input with its source text and gold label."""

    ids: tuple[int, ...]
    raw_text: str
    label: int
    line: int = 0

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValueError("token sequence must be non-empty")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def n(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocab, label: int = 0, line: int = 0) -> TokenSequence:
    """Tokenize *text* against *vocab*, mapping out-of-vocabulary words to unknown."""
    if not text.strip():
        raise ValueError("empty text")
    words = split_words(text)
    ids = tuple(vocab.id_of(w) for w in words)
    return TokenSequence(ids=ids, raw_text=text, label=label, line=line)


def detokenize(ids: tuple[int, ...] | list[int], vocab: Vocab) -> str:
    """Render token ids back to a whitespace-joined string."""
    return " ".join(vocab.lookup(i) for i in ids)


@dataclass(frozen=True)
class Dataset:
    examples: tuple[TokenSequence, ...]
    name: str = "dataset"

    def __post_init__(self):
        if not self.examples:
            raise ValueError("dataset must be non-empty")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def read_jsonl_texts(path: str | Path) -> list[tuple[str, int, int]]:
    """Parse a JSONL file of ``{"text": ..., "label": 0|1}`` objects into
    (text, label, line-number) triples, preserving line order. Malformed
    lines or labels outside {0, 1} raise with the line number."""
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                raise ValueError(f"{path}:{lineno}: expected object with 'text' and 'label'")
            label = obj["label"]
            if label not in (0, 1):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            if not isinstance(obj["text"], str) or not obj["text"].strip():
                raise ValueError(f"{path}:{lineno}: 'text' must be a non-empty string")
            rows.append((obj["text"], label, lineno))
    if not rows:
        raise ValueError(f"{path}: no examples")
    return rows


def load_jsonl(path: str | Path, vocab: Vocab, name: str | None = None) -> Dataset:
    """Load and tokenize a JSONL dataset against *vocab*."""
    path = Path(path)
    examples = tuple(
        tokenize(text, vocab, label=label, line=lineno) for text, label, lineno in read_jsonl_texts(path)
    )
    return Dataset(examples=examples, name=name or path.stem)


@dataclass(frozen=True, order=True)
class Substitution:
    """A single token replacement: put *token* at position *location*."""

    location: int
    token: int


@dataclass(frozen=True)
class Coalition:
    """A conflict-free set of simultaneous substitutions (pairwise-distinct locations)."""

    members: frozenset[Substitution] = field(default_factory=frozenset)

    def __post_init__(self):
        locations = [s.location for s in self.members]
        if len(set(locations)) != len(locations):
            raise ValueError("conflicting coalition: duplicate location")

    @classmethod
    def of(cls, *subs: Substitution) -> "Coalition":
        members = frozenset(subs)
        if len(members) != len(subs):
            # Identical duplicates collapse in the frozenset; that still means
            # the caller supplied a conflicting location twice.
            raise ValueError("conflicting coalition: duplicate location")
        return cls(members)

    def locations(self) -> frozenset[int]:
        return frozenset(s.location for s in self.members)

    def sorted_members(self) -> tuple[Substitution, ...]:
        return tuple(sorted(self.members))

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, sub: Substitution) -> bool:
        return sub in self.members


def apply_substitutions(x: TokenSequence, coalition: Coalition) -> TokenSequence:
    """Apply every substitution in *coalition* to *x*, leaving other positions intact."""
    ids = list(x.ids)
    for sub in coalition:
        if not 0 <= sub.location < x.n:
            raise ValueError(f"substitution location {sub.location} out of range for n={x.n}")
        ids[sub.location] = sub.token
    return TokenSequence(ids=tuple(ids), raw_text=x.raw_text, label=x.label, line=x.line)
