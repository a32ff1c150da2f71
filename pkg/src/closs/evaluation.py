"""Flip-rate and text-quality metrics, pluggable perplexity scoring, and the
experiment runner that sweeps strategies over a dataset and emits reports."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import Dataset, TokenSequence, Vocab
from .gateway import Gateway, TransportError
from .search import SearchConfig, SearchResult, run_strategy

CSV_HEADER = "strategy,dataset,model,F_pct,C_pct,bleu,perplexity,avg_queries,seed"


@dataclass(frozen=True)
class GenerationRecord:
    """Per-input outcome with everything the metrics need, JSON-serializable."""

    index: int
    strategy: str
    success: bool
    n: int
    tokens_changed: int
    queries: int
    p_before: float
    p_after: float | None
    edits: tuple[tuple[int, str, str], ...]
    tokens_before: tuple[str, ...]
    tokens_after: tuple[str, ...] | None
    dataset: str
    model: str
    seed: int

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "strategy": self.strategy,
            "success": self.success,
            "edits": [{"pos": p, "from": a, "to": b} for p, a, b in self.edits],
            "queries": self.queries,
            "p_before": self.p_before,
            "p_after": self.p_after,
            "n": self.n,
            "tokens_before": list(self.tokens_before),
            "tokens_after": list(self.tokens_after) if self.tokens_after is not None else None,
            "dataset": self.dataset,
            "model": self.model,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GenerationRecord":
        return cls(
            index=obj["index"],
            strategy=obj["strategy"],
            success=obj["success"],
            n=obj["n"],
            tokens_changed=len(obj["edits"]),
            queries=obj["queries"],
            p_before=obj["p_before"],
            p_after=obj.get("p_after"),
            edits=tuple((e["pos"], e["from"], e["to"]) for e in obj["edits"]),
            tokens_before=tuple(obj["tokens_before"]),
            tokens_after=tuple(obj["tokens_after"]) if obj.get("tokens_after") is not None else None,
            dataset=obj.get("dataset", "dataset"),
            model=obj.get("model", "model"),
            seed=obj.get("seed", 0),
        )


def make_record(
    index: int,
    x: TokenSequence,
    result: SearchResult,
    cfg: SearchConfig,
    backend: Gateway,
    dataset_name: str,
) -> GenerationRecord:
    edits = tuple(
        (s.location, backend.token_string(x.ids[s.location]), backend.token_string(s.token))
        for s in result.substitutions.sorted_members()
    )
    tokens_before = tuple(backend.token_string(i) for i in x.ids)
    tokens_after = None
    if result.success and result.counterfactual is not None:
        tokens_after = tuple(backend.token_string(i) for i in result.counterfactual.ids)
    return GenerationRecord(
        index=index,
        strategy=cfg.strategy.value,
        success=result.success,
        n=x.n,
        tokens_changed=len(result.substitutions),
        queries=result.queries,
        p_before=result.p_before,
        p_after=result.p_after,
        edits=edits,
        tokens_before=tokens_before,
        tokens_after=tokens_after,
        dataset=dataset_name,
        model=backend.describe(),
        seed=cfg.seed,
    )


def failure_rate(records: list[GenerationRecord]) -> float:
    """Percent of inputs where no flip was found."""
    if not records:
        raise ValueError("no records")
    failures = sum(1 for r in records if not r.success)
    return 100.0 * failures / len(records)


def percent_changed(records: list[GenerationRecord]) -> float | None:
    """Mean percent of tokens modified among successes; None when nothing succeeded."""
    rates = [100.0 * r.tokens_changed / r.n for r in records if r.success]
    if not rates:
        return None
    return float(np.mean(rates))


def _ngram_counts(tokens, k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def bleu(reference, hypothesis) -> float:
    """BLEU-4 with uniform weights, add-one smoothing on zero n-gram matches,
    and the standard brevity penalty. Equal-length inputs have no penalty."""
    ref = list(getattr(reference, "ids", reference))
    hyp = list(getattr(hypothesis, "ids", hypothesis))
    if not ref or not hyp:
        raise ValueError("bleu requires non-empty sequences")
    log_precision = 0.0
    for k in (1, 2, 3, 4):
        total = max(len(hyp) - k + 1, 0)
        matched = 0
        if total:
            ref_counts = _ngram_counts(ref, k)
            matched = sum(min(c, ref_counts[g]) for g, c in _ngram_counts(hyp, k).items())
        p = matched / total if matched > 0 else 1.0 / (total + 1)
        log_precision += 0.25 * math.log(p)
    brevity = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return brevity * math.exp(log_precision)


class UniformScorer:
    """Assigns every token probability 1/|V|; its perplexity is |V| by identity."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def token_logprobs(self, ids) -> np.ndarray:
        return np.full(len(list(ids)), -math.log(self.vocab_size))

    def sequence_perplexity(self, ids) -> float:
        return float(self.vocab_size)

    def perplexity_of_tokens(self, tokens) -> float:
        return float(self.vocab_size)


class TrigramScorer:
    """Add-k smoothed trigram language model fit on a token-id corpus.

    Contexts are padded with a begin marker, so the first token is scored
    against the sentence boundary. Out-of-vocabulary words map to the unknown
    id through the attached vocab.
    """

    BOS = -1

    def __init__(self, vocab: Vocab, add_k: float = 1.0):
        if add_k <= 0:
            raise ValueError("add_k must be positive")
        self.vocab = vocab
        self.add_k = add_k
        self.trigrams: Counter = Counter()
        self.contexts: Counter = Counter()

    def fit(self, data: Dataset) -> "TrigramScorer":
        for ex in data:
            u, v = self.BOS, self.BOS
            for w in ex.ids:
                self.trigrams[(u, v, w)] += 1
                self.contexts[(u, v)] += 1
                u, v = v, w
        return self

    def token_logprobs(self, ids) -> np.ndarray:
        ids = list(ids)
        out = np.empty(len(ids))
        u, v = self.BOS, self.BOS
        denom_k = self.add_k * self.vocab.size
        for i, w in enumerate(ids):
            num = self.trigrams.get((u, v, w), 0) + self.add_k
            den = self.contexts.get((u, v), 0) + denom_k
            out[i] = math.log(num / den)
            u, v = v, w
        return out

    def perplexity_of_tokens(self, tokens) -> float:
        ids = [self.vocab.id_of(t) for t in tokens]
        return perplexity(ids, self)


class WireScorer:
    """Perplexity computed by a remote model server over the wire protocol."""

    def __init__(self, backend):
        self.backend = backend

    def sequence_perplexity(self, ids) -> float:
        return self.backend.sequence_perplexity(ids)

    def perplexity_of_tokens(self, tokens) -> float:
        ids = self.backend.encode_text(" ".join(tokens))
        return self.backend.sequence_perplexity(ids)


def perplexity(x, scorer) -> float:
    """Exponentiated mean negative log-likelihood per token under *scorer*."""
    ids = list(getattr(x, "ids", x))
    if hasattr(scorer, "sequence_perplexity"):
        return scorer.sequence_perplexity(ids)
    return float(math.exp(-np.mean(scorer.token_logprobs(ids))))


@dataclass(frozen=True)
class MetricsReport:
    strategy: str
    dataset: str
    model: str
    percent_fail: float
    percent_changed: float | None
    bleu: float | None
    perplexity: float | None
    avg_queries: float
    seed: int | str

    def cells(self) -> list[str]:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)  # repr round-trips float64 exactly
            return str(v)

        return [
            cell(v)
            for v in (
                self.strategy,
                self.dataset,
                self.model,
                self.percent_fail,
                self.percent_changed,
                self.bleu,
                self.perplexity,
                self.avg_queries,
                self.seed,
            )
        ]


def aggregate_metrics(records: list[GenerationRecord], scorer=None) -> MetricsReport:
    """Fold per-input records into one report row."""
    if not records:
        raise ValueError("no records")
    bleus = []
    ppls = []
    for r in records:
        if not r.success or r.tokens_after is None:
            continue
        bleus.append(bleu(r.tokens_before, r.tokens_after))
        if scorer is not None:
            ppls.append(scorer.perplexity_of_tokens(r.tokens_after))
    return MetricsReport(
        strategy=records[0].strategy,
        dataset=records[0].dataset,
        model=records[0].model,
        percent_fail=failure_rate(records),
        percent_changed=percent_changed(records),
        bleu=float(np.mean(bleus)) if bleus else None,
        perplexity=float(np.mean(ppls)) if ppls else None,
        avg_queries=float(np.mean([r.queries for r in records])),
        seed=records[0].seed,
    )


def derive_seed(base: int, index: int) -> int:
    """Stable per-input seed from a run seed and the input index."""
    seq = np.random.SeedSequence([base & 0xFFFFFFFFFFFFFFFF, index])
    return int(seq.generate_state(1, np.uint32)[0])


def run_config(
    data: Dataset,
    cfg: SearchConfig,
    backend: Gateway,
    jobs: int = 1,
    sink=None,
) -> list[GenerationRecord]:
    """Run one configuration over every input, in input order, with a fixed
    derived seed per input. ``sink`` receives each record as it is produced."""

    def one(index_example):
        index, x = index_example
        worker = backend.fork()
        input_cfg = replace(cfg, seed=derive_seed(cfg.seed, index))
        result = run_strategy(x, input_cfg, worker)
        record = make_record(index, x, result, cfg, worker, data.name)
        return record

    items = list(enumerate(data.examples))
    records: list[GenerationRecord] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            produced = pool.map(one, items)  # yields in input order as results land
            for record in produced:
                if sink is not None:
                    sink(record)
                records.append(record)
    else:
        for item in items:
            record = one(item)
            if sink is not None:
                sink(record)
            records.append(record)
    return records


def _mean_report(reports: list[MetricsReport]) -> MetricsReport:
    def mean_or_none(values):
        present = [v for v in values if v is not None]
        if len(present) != len(values) or not present:
            return None
        return float(np.mean(present))

    first = reports[0]
    return MetricsReport(
        strategy=first.strategy,
        dataset=first.dataset,
        model=first.model,
        percent_fail=float(np.mean([r.percent_fail for r in reports])),
        percent_changed=mean_or_none([r.percent_changed for r in reports]),
        bleu=mean_or_none([r.bleu for r in reports]),
        perplexity=mean_or_none([r.perplexity for r in reports]),
        avg_queries=float(np.mean([r.avg_queries for r in reports])),
        seed="mean",
    )


def summarize(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Append a mean row after every group of per-seed rows that share a strategy."""
    out: list[MetricsReport] = []
    groups: dict[tuple, list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.strategy, r.dataset, r.model), []).append(r)
    for group in groups.values():
        out.extend(group)
        if len(group) > 1:
            out.append(_mean_report(group))
    return out


def write_report_csv(path: str | Path, reports: list[MetricsReport]):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER.split(","))
        for r in reports:
            writer.writerow(r.cells())


def run_experiment(
    data: Dataset,
    cfgs: list[SearchConfig],
    backend: Gateway,
    out_dir: str | Path,
    scorer=None,
    jobs: int = 1,
) -> list[MetricsReport]:
    """Run every configuration over the dataset; write per-input JSONL and the
    CSV report. Flips are attempted regardless of the model's correctness; a
    failed flip is data, not an error. A backend failure flushes what was
    produced, marks the results file as aborted, and re-raises."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"
    reports: list[MetricsReport] = []
    with results_path.open("w", encoding="utf-8") as fh:
        def sink(record: GenerationRecord):
            fh.write(json.dumps(record.to_json()) + "\n")
            fh.flush()

        try:
            for cfg in cfgs:
                records = run_config(data, cfg, backend, jobs=jobs, sink=sink)
                reports.append(aggregate_metrics(records, scorer=scorer))
        except TransportError as exc:
            fh.write(json.dumps({"aborted": True, "error": str(exc)}) + "\n")
            raise
    write_report_csv(out_dir / "report.csv", summarize(reports))
    return reports
