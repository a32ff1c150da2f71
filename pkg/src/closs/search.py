"""Breadth-first beam search over substitution subsets.

The full pipeline orders successors by estimated Shapley value; ablation
variants reorder by location saliency, drop the embedding optimization, or
swap in the unfit LM head. The gradient-surrogate baseline scores subsets by
summed first-order estimates and only consults the real model to certify
flips. All variants share the edit budget: search depth never exceeds the
allowed fraction of modified tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .corpus import Coalition, Substitution, TokenSequence, apply_substitutions
from .gateway import Gateway
from .shapley import (
    ShapleyTable,
    coalition_size,
    estimate_sv,
    filter_locations,
    round_half_up,
    sample_coalitions,
)


class Strategy(str, Enum):
    CLOSS = "closs"
    CLOSS_SV = "closs-sv"
    CLOSS_EO = "closs-eo"
    CLOSS_RTL = "closs-rtl"
    HOTFLIP_D = "hotflip-d"
    HOTFLIP_O = "hotflip-o"


# Beam widths for the gradient-surrogate baseline variants are fixed by the
# strategy, not by the configured beam.
HOTFLIP_BEAM = {Strategy.HOTFLIP_D: 10, Strategy.HOTFLIP_O: 100}


@dataclass(frozen=True)
class SearchConfig:
    k: int = 30
    w: int = 5
    b: int | None = 15  # None removes the beam limit
    c_max: float = 0.15
    seed: int = 0
    strategy: Strategy = Strategy.CLOSS
    scale_w_with_universe: bool = False
    everything_salient: bool = False


@dataclass(frozen=True)
class SearchNode:
    subset: Coalition
    score: float


@dataclass(frozen=True)
class SearchResult:
    success: bool
    counterfactual: TokenSequence | None
    substitutions: Coalition
    queries: int
    nodes_expanded: int
    p_before: float
    p_after: float | None


def depth_limit(c_max: float, n: int) -> int:
    """Maximum number of edits: the allowed fraction of tokens, at least one."""
    return max(1, round_half_up(c_max * n))


def _canonical(coalition: Coalition) -> tuple:
    return tuple((s.location, s.token) for s in coalition.sorted_members())


def _beam_search_ordered(
    x: TokenSequence,
    ordered_subs: list[Substitution],
    cfg: SearchConfig,
    backend: Gateway,
    y_target: int | None = None,
    base_p1: float | None = None,
) -> SearchResult:
    start_q = backend.counter.forward_queries
    if base_p1 is None:
        base_p1 = backend.predict(x).p1
    if y_target is None:
        y_target = 0 if base_p1 > 0.5 else 1

    def finish(success: bool, coalition: Coalition, p_after: float | None, expanded: int) -> SearchResult:
        return SearchResult(
            success=success,
            counterfactual=apply_substitutions(x, coalition) if success else None,
            substitutions=coalition,
            queries=backend.counter.forward_queries - start_q,
            nodes_expanded=expanded,
            p_before=base_p1,
            p_after=p_after,
        )

    if (base_p1 if y_target == 1 else 1.0 - base_p1) > 0.5:
        # Degenerate case: the input is already classified as the target.
        return finish(True, Coalition(), base_p1, 0)

    cap = depth_limit(cfg.c_max, x.n)
    beam: list[Coalition] = [Coalition()]
    seen: set[frozenset] = {frozenset()}
    expanded = 0
    for depth in range(1, cap + 1):
        level: list[Coalition] = []
        for node in beam:
            node_locs = node.locations()
            taken = 0
            for sub in ordered_subs:
                if cfg.b is not None and taken >= cfg.b:
                    break
                if sub.location in node_locs:
                    continue
                members = node.members | {sub}
                if members in seen:
                    continue
                seen.add(members)
                level.append(Coalition(members))
                taken += 1
        if not level:
            return finish(False, Coalition(), None, expanded)
        expanded += len(level)
        scores = backend.predict_batch([apply_substitutions(x, L) for L in level])
        target_ps = [s.p1 if y_target == 1 else 1.0 - s.p1 for s in scores]
        for coalition, score, p_t in zip(level, scores, target_ps):
            if p_t > 0.5:
                return finish(True, coalition, score.p1, expanded)
        if depth == cap:
            break
        nodes = [SearchNode(L, p_t - len(L) / x.n) for L, p_t in zip(level, target_ps)]
        nodes.sort(key=lambda nd: (-nd.score, _canonical(nd.subset)))
        width = len(nodes) if cfg.b is None else cfg.b
        beam = [nd.subset for nd in nodes[:width]]
    return finish(False, Coalition(), None, expanded)


def beam_search(
    x: TokenSequence,
    table: ShapleyTable,
    cfg: SearchConfig,
    backend: Gateway,
    y_target: int | None = None,
    base_p1: float | None = None,
) -> SearchResult:
    """Search guided by the table's values in descending order."""
    return _beam_search_ordered(x, table.ordered_substitutions(), cfg, backend, y_target, base_p1)


def sampling_budget(cfg: SearchConfig, n: int, num_locations: int) -> int:
    """Coalition evaluations for the sampling phase: twice the per-substitution
    target times the candidate count, optionally scaled with the location
    universe when filtering was widened."""
    base = 2 * cfg.w * cfg.k
    if cfg.scale_w_with_universe:
        default_m = min(n, max(1, round_half_up(cfg.c_max * n)))
        return max(1, round_half_up(base * num_locations / default_m))
    return base


def run_strategy(x: TokenSequence, cfg: SearchConfig, backend: Gateway) -> SearchResult:
    """Run the configured strategy end to end on one input.

    The reported query count is the full per-input forward-query delta: the
    base prediction, the sampling phase (when the strategy uses one) and every
    search evaluation.
    """
    if cfg.strategy in HOTFLIP_BEAM:
        return hotflip(x, cfg, backend)
    start_q = backend.counter.forward_queries
    base = backend.predict(x)
    y_target = 1 - base.label
    sal = backend.saliency(x)
    filter_cmax = 1.0 if cfg.everything_salient else cfg.c_max
    locations = filter_locations(sal, filter_cmax, x.n)

    prop_backend = backend
    if cfg.strategy is Strategy.CLOSS_EO:
        prop_backend = backend.proposal_variant(use_trajectory=False)
    elif cfg.strategy is Strategy.CLOSS_RTL:
        prop_backend = backend.proposal_variant(lm_head_mode="untrained")
    proposal = prop_backend.propose_candidates(x, y_target, cfg.k)

    locations = [t for t in locations if proposal.per_position[t]]
    if not locations:
        return SearchResult(False, None, Coalition(), backend.counter.forward_queries - start_q, 0, base.p1, None)
    universe = [Substitution(t, tok) for t in locations for tok in proposal.per_position[t]]

    if cfg.strategy is Strategy.CLOSS_SV:
        # Saliency-ordered: locations already come sorted by descending
        # saliency; candidates keep their proposal rank within a location.
        ordered = list(universe)
    else:
        c_s = coalition_size(cfg.c_max, x.n, num_locations=len(locations))
        budget = sampling_budget(cfg, x.n, len(locations))
        samples = sample_coalitions(proposal, locations, c_s, budget, cfg.seed, backend, x, base_p1=base.p1)
        table = estimate_sv(samples, universe)
        ordered = table.ordered_substitutions()

    result = _beam_search_ordered(x, ordered, cfg, backend, y_target=y_target, base_p1=base.p1)
    return replace(result, queries=backend.counter.forward_queries - start_q)


def hotflip(
    x: TokenSequence,
    cfg: SearchConfig,
    backend: Gateway,
    y_target: int | None = None,
    base_p1: float | None = None,
) -> SearchResult:
    """Beam search over a first-order surrogate of the score change.

    Every substitution is scored once from the gradient at the original input;
    a subset's surrogate value is the sum of its members' scores. The true
    model is queried only to check the pruned beam for flips, once per depth.
    The default variant uses beam 10 and unrestricted successor generation;
    the tuned variant uses beam 100 and forces the children of a common parent
    to modify pairwise-distinct locations.
    """
    if cfg.strategy not in HOTFLIP_BEAM:
        raise ValueError(f"not a gradient-surrogate strategy: {cfg.strategy}")
    start_q = backend.counter.forward_queries
    if base_p1 is None:
        base_p1 = backend.predict(x).p1
    if y_target is None:
        y_target = 0 if base_p1 > 0.5 else 1

    def finish(success: bool, coalition: Coalition, p_after: float | None, expanded: int) -> SearchResult:
        return SearchResult(
            success=success,
            counterfactual=apply_substitutions(x, coalition) if success else None,
            substitutions=coalition,
            queries=backend.counter.forward_queries - start_q,
            nodes_expanded=expanded,
            p_before=base_p1,
            p_after=p_after,
        )

    if (base_p1 if y_target == 1 else 1.0 - base_p1) > 0.5:
        return finish(True, Coalition(), base_p1, 0)

    estimates = backend.hotflip_scores(x, y_target)
    width = HOTFLIP_BEAM[cfg.strategy]
    distinct_children = cfg.strategy is Strategy.HOTFLIP_O
    cap = depth_limit(cfg.c_max, x.n)

    n, vocab_size = estimates.shape
    order = sorted(
        ((-estimates[t, v], t, v) for t in range(n) for v in range(vocab_size) if np.isfinite(estimates[t, v]))
    )
    global_subs = [(Substitution(t, v), -neg) for neg, t, v in order]
    if not global_subs:
        return finish(False, Coalition(), None, 0)
    best_per_location: dict[int, tuple[Substitution, float]] = {}
    for sub, score in global_subs:
        best_per_location.setdefault(sub.location, (sub, score))

    beam: list[tuple[Coalition, float]] = [(Coalition(), 0.0)]
    seen: set[frozenset] = {frozenset()}
    expanded = 0
    for _depth in range(1, cap + 1):
        children: list[tuple[Coalition, float]] = []
        for node, surrogate in beam:
            node_locs = node.locations()
            if distinct_children:
                pool = [best_per_location[t] for t in sorted(best_per_location) if t not in node_locs]
                pool.sort(key=lambda item: -item[1])
            else:
                pool = [(s, v) for s, v in global_subs if s.location not in node_locs]
            taken = 0
            # Per-parent quota: enough to cover the global top `width` even
            # after cross-parent duplicates are removed.
            quota = len(pool) if distinct_children else width + len(beam)
            for sub, score in pool:
                if taken >= quota:
                    break
                members = node.members | {sub}
                if members in seen:
                    continue
                seen.add(members)
                children.append((Coalition(members), surrogate + score))
                taken += 1
        if not children:
            return finish(False, Coalition(), None, expanded)
        expanded += len(children)
        children.sort(key=lambda cs: (-cs[1], _canonical(cs[0])))
        beam = children[:width]
        scores = backend.predict_batch([apply_substitutions(x, L) for L, _ in beam])
        for (coalition, _), score in zip(beam, scores):
            p_t = score.p1 if y_target == 1 else 1.0 - score.p1
            if p_t > 0.5:
                return finish(True, coalition, score.p1, expanded)
    return finish(False, Coalition(), None, expanded)
