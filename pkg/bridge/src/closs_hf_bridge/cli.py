"""Bridge commands: serve the wire protocol, fit a replacement LM head."""

from __future__ import annotations

import argparse
import sys

from .model import BridgeModel, read_jsonl_texts, save_head


def _build_model(args) -> BridgeModel:
    head_mode, retrained_path = args.head, None
    if args.head.startswith("retrained:"):
        head_mode, retrained_path = "retrained", args.head.split(":", 1)[1]
    if args.shim:
        model = BridgeModel.shim(seed=args.seed, step_size=args.step_size, l1=args.l1)
        if retrained_path:
            from .model import load_head

            model.with_head("retrained", load_head(retrained_path))
        if head_mode not in model.heads:
            raise ValueError(f"head mode {head_mode!r} not available on this server")
        model.head_mode = head_mode
        model.padded_batching = args.padded_batch
        return model
    if not args.model:
        raise ValueError("pass --model <path-or-identifier> or --shim")
    model = BridgeModel.from_pretrained(
        args.model,
        head_mode=head_mode,
        retrained_head_path=retrained_path,
        step_size=args.step_size,
        l1=args.l1,
        device=args.device,
        ppl_model_path=args.ppl_model,
    )
    model.padded_batching = args.padded_batch
    return model


def cmd_serve(args) -> int:
    from . import server

    model = _build_model(args)
    if args.mode == "stdio":
        server.serve_stdio(model)
    else:
        server.serve_http(model, args.host, args.port)
    return 0


def cmd_retrain_head(args) -> int:
    from .retrain import head_token_loss, retrain_head

    model = _build_model(args)
    texts = [t for t, _ in read_jsonl_texts(args.data)]
    before = head_token_loss(model, model.heads["pretrained"], texts)
    head = retrain_head(model, texts, seed=args.seed, epochs=args.epochs, lr=args.lr)
    after = head_token_loss(model, head, texts)
    save_head(args.out, head)
    print(f"token loss: pretrained {before:.4f} -> retrained {after:.4f}; head saved to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="closs-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", default=None, help="classifier path or hub identifier")
        p.add_argument("--shim", action="store_true", help="serve the tiny deterministic model")
        p.add_argument("--head", default="pretrained", help="pretrained or retrained:<path>")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--step-size", type=float, default=0.5)
        p.add_argument("--l1", type=float, default=0.01)
        p.add_argument("--device", default="cpu")
        p.add_argument("--ppl-model", default=None, help="causal LM for true perplexity scoring")
        p.add_argument("--padded-batch", action="store_true",
                       help="pad batches into one forward (faster, not bit-stable vs single predictions)")

    p = sub.add_parser("serve", help="answer protocol requests over stdio or HTTP")
    common(p)
    p.add_argument("--mode", choices=["stdio", "http"], default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8766)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("retrain-head", help="fit an LM head on the encoder over a corpus")
    common(p)
    p.add_argument("--data", required=True, help="JSONL corpus of {text, label}")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.set_defaults(func=cmd_retrain_head)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
