"""Command-line surface: train the bundled model, generate counterfactuals,
aggregate metrics, audit the Shapley sampler, and serve the wire protocol."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .corpus import Dataset, TokenSequence, build_vocab, load_jsonl, read_jsonl_texts
from .evaluation import (
    GenerationRecord,
    TrigramScorer,
    WireScorer,
    aggregate_metrics,
    derive_seed,
    run_config,
    summarize,
    write_report_csv,
)
from .gateway import RemoteBackend, TransportError, backend_from_uri
from .search import SearchConfig, Strategy
from .shapley import brute_force_sv, coalition_size, estimate_sv, filter_locations, sample_coalitions
from .toy_model import init_lm_head, retrain_lm_head, save_checkpoint, train_classifier


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    return int(os.environ.get("CLOSS_SEED", "0"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, payload: dict):
    manifest = {
        "schema_version": 1,
        "tool": "closs",
        "tool_version": __version__,
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(payload)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _search_config(args) -> SearchConfig:
    return SearchConfig(
        k=args.k,
        w=args.w,
        b=args.beam,
        c_max=args.cmax,
        seed=_resolve_seed(args.seed),
        strategy=Strategy(args.strategy),
        scale_w_with_universe=args.scale_w,
        everything_salient=args.everything_salient,
    )


def cmd_train_toy(args) -> int:
    rows = read_jsonl_texts(args.data)
    vocab = build_vocab([text for text, _, _ in rows], max_size=args.vocab_size, min_freq=args.min_freq)
    data = load_jsonl(args.data, vocab)
    model = train_classifier(
        data,
        vocab,
        epochs=args.epochs,
        lr=args.lr,
        seed=_resolve_seed(args.seed),
        dim=args.dim,
        hidden=args.hidden,
    )
    retrained = retrain_lm_head(data, model, seed=_resolve_seed(args.seed))
    untrained = init_lm_head(model, seed=_resolve_seed(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, retrained, untrained)
    print(f"trained on {len(data)} examples, |V|={vocab.size}, accuracy={model.train_accuracy:.3f}")
    print(f"checkpoint written to {out}")
    return 0


def _load_inputs_via_backend(path: str, backend) -> Dataset:
    examples = []
    for text, label, lineno in read_jsonl_texts(path):
        ids = backend.encode_text(text)
        if not ids:
            raise ValueError(f"{path}:{lineno}: text tokenized to nothing")
        examples.append(TokenSequence(ids=tuple(ids), raw_text=text, label=label, line=lineno))
    return Dataset(examples=tuple(examples), name=Path(path).stem)


def cmd_generate(args) -> int:
    cfg = _search_config(args)
    backend = backend_from_uri(args.model, step_size=args.step_size, l1=args.l1)
    try:
        data = _load_inputs_via_backend(args.data, backend)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        results_path = out_dir / "results.jsonl"
        successes = 0
        with results_path.open("w", encoding="utf-8") as fh:
            def sink(record: GenerationRecord):
                nonlocal successes
                successes += int(record.success)
                fh.write(json.dumps(record.to_json()) + "\n")
                fh.flush()

            run_config(data, cfg, backend, jobs=args.jobs, sink=sink)
        ckpt = Path(args.model[5:] if args.model.startswith("ckpt:") else args.model)
        _write_manifest(
            out_dir,
            "generate",
            {
                "backend": args.model,
                "backend_sha256": _sha256(ckpt) if ckpt.is_file() else None,
                "backend_options": {"step_size": args.step_size, "l1": args.l1},
                "data": str(args.data),
                "out": str(out_dir),
                "jobs": args.jobs,
                "config": {**dataclasses.asdict(cfg), "strategy": cfg.strategy.value},
            },
        )
        print(f"{successes}/{len(data)} flips found; results in {results_path}")
        return 0
    finally:
        backend.close()


def _read_records(paths: list[str]) -> list[GenerationRecord]:
    records = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj.get("aborted"):
                    raise ValueError(f"{path}: results file marked aborted: {obj.get('error')}")
                records.append(GenerationRecord.from_json(obj))
    if not records:
        raise ValueError("no records in the given results files")
    return records


def _build_scorer(args):
    if args.ppl_scorer is None:
        return None, None
    if args.ppl_scorer == "trigram":
        if not args.ppl_train:
            raise ValueError("--ppl-scorer trigram requires --ppl-train <jsonl>")
        rows = read_jsonl_texts(args.ppl_train)
        vocab = build_vocab([t for t, _, _ in rows], max_size=args.ppl_vocab_size)
        corpus = load_jsonl(args.ppl_train, vocab)
        return TrigramScorer(vocab, add_k=args.ppl_add_k).fit(corpus), None
    if args.ppl_scorer == "wire":
        if not args.ppl_backend:
            raise ValueError("--ppl-scorer wire requires --ppl-backend <uri>")
        backend = backend_from_uri(args.ppl_backend)
        if not isinstance(backend, RemoteBackend):
            raise ValueError("--ppl-backend must be a remote backend URI")
        return WireScorer(backend), backend
    raise ValueError(f"unknown scorer {args.ppl_scorer!r}")


def cmd_evaluate(args) -> int:
    records = _read_records(args.results)
    datasets = {r.dataset for r in records}
    if len(datasets) > 1 and not args.allow_mixed:
        raise ValueError(f"results mix datasets {sorted(datasets)}; pass --allow-mixed to aggregate anyway")
    scorer, scorer_backend = _build_scorer(args)
    try:
        groups: dict[tuple, list[GenerationRecord]] = {}
        for r in records:
            groups.setdefault((r.strategy, r.dataset, r.model, r.seed), []).append(r)
        reports = [aggregate_metrics(group, scorer=scorer) for group in groups.values()]
        write_report_csv(args.out, summarize(reports))
        print(f"report written to {args.out}")
        return 0
    finally:
        if scorer_backend is not None:
            scorer_backend.close()


def cmd_shapley_audit(args) -> int:
    if any(w < 1 for w in args.w):
        raise SystemExit(2)
    backend = backend_from_uri(args.model, step_size=args.step_size, l1=args.l1)
    try:
        data = _load_inputs_via_backend(args.data, backend)
        if not 0 <= args.index < len(data):
            raise ValueError(f"--index {args.index} outside dataset of {len(data)}")
        x = data.examples[args.index]
        base = backend.predict(x)
        y_target = 1 - base.label
        locations = filter_locations(backend.saliency(x), args.cmax, x.n)
        proposal = backend.propose_candidates(x, y_target, args.k)
        locations = [t for t in locations if proposal.per_position[t]]
        c_s = coalition_size(args.cmax, x.n, num_locations=len(locations))
        try:
            oracle = brute_force_sv(proposal, locations, c_s, backend, x, base_p1=base.p1)
        except ValueError as exc:
            if "too large" in str(exc):
                raise ValueError(f"{exc}; lower --k or --cmax to shrink the instance") from exc
            raise
        universe = oracle.ordered_substitutions()
        oracle_values = np.asarray([oracle.sv(s) for s in universe])

        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "audit.jsonl").open("w", encoding="utf-8") as fh:
            for sample in oracle.samples:
                members = sample.coalition.sorted_members()
                fh.write(
                    json.dumps(
                        {
                            "locs": [s.location for s in members],
                            "tokens": [s.token for s in members],
                            "value": sample.value,
                        }
                    )
                    + "\n"
                )

        base_seed = _resolve_seed(args.seed)
        print(f"instance: n={x.n} locations={len(locations)} c_s={c_s} "
              f"universe={len(universe)} coalitions={len(oracle.samples)}")
        print("w,mean_spearman,budget")
        rows = []
        for w in args.w:
            budget = 2 * w * args.k
            correlations = []
            for s in range(args.seeds):
                if args.enumerate:
                    samples = sample_coalitions(
                        proposal, locations, c_s, budget, 0, backend, x, base_p1=base.p1, enumerate_all=True
                    )
                else:
                    samples = sample_coalitions(
                        proposal, locations, c_s, budget, derive_seed(base_seed, 1000 * w + s), backend, x,
                        base_p1=base.p1,
                    )
                table = estimate_sv(samples, universe)
                estimate_values = np.asarray([table.sv(sub) for sub in universe])
                rho = spearmanr(oracle_values, estimate_values).statistic
                correlations.append(float(rho))
            mean_rho = float(np.mean(correlations))
            rows.append((w, mean_rho, budget))
            print(f"{w},{mean_rho!r},{budget}")
        _write_manifest(
            out_dir,
            "shapley-audit",
            {
                "backend": args.model,
                "data": str(args.data),
                "index": args.index,
                "k": args.k,
                "cmax": args.cmax,
                "w": list(args.w),
                "seeds": args.seeds,
                "seed": base_seed,
                "enumerate": bool(args.enumerate),
                "correlations": {str(w): rho for w, rho, _ in rows},
            },
        )
        return 0
    finally:
        backend.close()


def cmd_serve(args) -> int:
    backend = backend_from_uri(
        "ckpt:" + args.model,
        step_size=args.step_size,
        l1=args.l1,
        use_trajectory=not args.no_trajectory,
        lm_head_mode=args.head,
    )
    scorer = None
    if args.ppl_data:
        vocab = backend.model.vocab
        scorer = TrigramScorer(vocab).fit(load_jsonl(args.ppl_data, vocab))
    from . import wire

    if args.mode == "stdio":
        wire.serve_stdio(backend, scorer)
    else:
        wire.serve_http(backend, args.host, args.port, scorer)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="closs", description=__doc__)
    parser.add_argument("--version", action="version", version=f"closs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the bundled classifier and LM head on a JSONL corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--min-freq", type=int, default=1)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("generate", help="generate counterfactuals for every input")
    p.add_argument("--model", required=True, help="ckpt:<path>, jsonl-ipc:<command> or http://<url>")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="closs", choices=[s.value for s in Strategy])
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--w", type=int, default=5)
    p.add_argument("--beam", type=int, default=15)
    p.add_argument("--cmax", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--everything-salient", action="store_true")
    p.add_argument("--scale-w", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--l1", type=float, default=0.01)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="aggregate result files into a CSV report")
    p.add_argument("--results", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--ppl-scorer", choices=["trigram", "wire"], default=None)
    p.add_argument("--ppl-train", default=None, help="corpus to fit the trigram scorer on")
    p.add_argument("--ppl-backend", default=None, help="remote backend URI for wire scoring")
    p.add_argument("--ppl-vocab-size", type=int, default=5000)
    p.add_argument("--ppl-add-k", type=float, default=1.0)
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("shapley-audit", help="compare sampled values against the enumeration oracle")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--w", type=int, nargs="+", default=[1, 2, 5, 10, 50])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--cmax", type=float, default=0.15)
    p.add_argument("--enumerate", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--l1", type=float, default=0.01)
    p.set_defaults(func=cmd_shapley_audit)

    p = sub.add_parser("serve", help="serve the wire protocol over a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=["stdio", "http"], default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--head", choices=["retrained", "untrained"], default="retrained")
    p.add_argument("--no-trajectory", action="store_true",
                   help="propose from the original embedding only")
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--l1", type=float, default=0.01)
    p.add_argument("--ppl-data", default=None, help="fit a trigram scorer for the ppl op")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
