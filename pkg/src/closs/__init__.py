"""Minimal-edit counterfactual text generation for binary classifiers.

Pipeline: optimize the input embeddings toward the opposite class, propose
token substitutions from the optimization trajectory through a corpus-fit
LM head, estimate each substitution's combinatoric flip value with sampled
fixed-size Shapley values, and assemble the final edit set by breadth-first
beam search under a hard edit budget.
"""

__version__ = "0.1.0"

from .corpus import (
    Coalition,
    Dataset,
    Substitution,
    TokenSequence,
    Vocab,
    apply_substitutions,
    build_vocab,
    detokenize,
    load_jsonl,
    tokenize,
)
from .gateway import (
    ClassScore,
    Gateway,
    QueryCounter,
    RemoteBackend,
    SaliencyVector,
    ToyBackend,
    backend_from_uri,
    toy_backend_from_checkpoint,
)
from .search import SearchConfig, SearchResult, Strategy, beam_search, hotflip, run_strategy
from .shapley import ShapleyTable, brute_force_sv, estimate_sv, filter_locations, sample_coalitions

__all__ = [
    "Coalition",
    "Dataset",
    "Substitution",
    "TokenSequence",
    "Vocab",
    "apply_substitutions",
    "build_vocab",
    "detokenize",
    "load_jsonl",
    "tokenize",
    "ClassScore",
    "Gateway",
    "QueryCounter",
    "RemoteBackend",
    "SaliencyVector",
    "ToyBackend",
    "backend_from_uri",
    "toy_backend_from_checkpoint",
    "SearchConfig",
    "SearchResult",
    "Strategy",
    "beam_search",
    "hotflip",
    "run_strategy",
    "ShapleyTable",
    "brute_force_sv",
    "estimate_sv",
    "filter_locations",
    "sample_coalitions",
    "__version__",
]
