"""Location filtering, fixed-size coalition sampling and Shapley value estimation.

A coalition is a conflict-free set of token substitutions; its value is the
signed change of the classifier's score toward the flip direction. Shapley
values under a fixed coalition size reduce to a difference of two means:
over sampled coalitions containing a substitution and over those that do not.
An exact enumeration oracle over small universes backs the sampled estimator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .candidates import CandidateProposal
from .corpus import Coalition, Substitution, TokenSequence, apply_substitutions

ORACLE_GUARD = 200_000


def round_half_up(x: float) -> int:
    """Round to the nearest integer with exact halves going up."""
    return int(math.floor(x + 0.5))


def filter_locations(saliency, c_max: float, n: int) -> list[int]:
    """The ``max(1, round(c_max * n))`` highest-saliency positions.

    Ties break toward the lower position index; the result is ordered by
    descending saliency.
    """
    if not 0 < c_max <= 1:
        raise ValueError("c_max must be in (0, 1]")
    scores = list(getattr(saliency, "scores", saliency))
    if len(scores) != n:
        raise ValueError(f"saliency length {len(scores)} does not match n={n}")
    m = min(n, max(1, round_half_up(c_max * n)))
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return order[:m]


def coalition_size(c_max: float, n: int, num_locations: int | None = None) -> int:
    """Fixed coalition cardinality: half the location budget, at least one,
    never more than the number of filtered locations."""
    if not 0 < c_max <= 1:
        raise ValueError("c_max must be in (0, 1]")
    c_s = max(1, round_half_up(0.5 * c_max * n))
    if num_locations is not None:
        c_s = min(c_s, num_locations)
    return c_s


def flip_direction(p_base: float) -> int:
    """+1 when the original prediction is class 0 (the flip raises p1), else -1."""
    return 1 if p_base <= 0.5 else -1


@dataclass(frozen=True)
class CoalitionSample:
    coalition: Coalition
    value: float

    def __post_init__(self):
        if not -1.0 < self.value < 1.0:
            raise ValueError(f"coalition value {self.value} outside (-1, 1)")


@dataclass(frozen=True)
class SvEstimate:
    sv: float
    hits: int
    flag: str | None = None  # "unsampled" or "in-all-samples" for degenerate means


@dataclass
class ShapleyTable:
    estimates: dict[Substitution, SvEstimate]
    c_s: int
    samples: list[CoalitionSample] = field(default_factory=list)

    def sv(self, sub: Substitution) -> float:
        return self.estimates[sub].sv

    def ordered_substitutions(self) -> list[Substitution]:
        """All covered substitutions by descending value, ties toward lower
        location then lower token id."""
        return sorted(self.estimates, key=lambda s: (-self.estimates[s].sv, s.location, s.token))


def _candidate_lists(proposal, locations: list[int]) -> dict[int, tuple[int, ...]]:
    per_position = getattr(proposal, "per_position", proposal)
    lists = {}
    for loc in locations:
        cands = tuple(per_position[loc])
        if not cands:
            raise ValueError(f"location {loc} has no candidates")
        lists[loc] = cands
    return lists


def _count_coalitions(cand_lists: dict[int, tuple[int, ...]], locations: list[int], c_s: int) -> int:
    total = 0
    for subset in itertools.combinations(sorted(locations), c_s):
        count = 1
        for loc in subset:
            count *= len(cand_lists[loc])
        total += count
        if total > ORACLE_GUARD:
            return total
    return total


def _all_coalitions(cand_lists, locations, c_s):
    for subset in itertools.combinations(sorted(locations), c_s):
        for tokens in itertools.product(*(cand_lists[loc] for loc in subset)):
            yield Coalition.of(*(Substitution(loc, tok) for loc, tok in zip(subset, tokens)))


def _evaluate_coalitions(coalitions, x: TokenSequence, backend, p_base: float, chunk: int = 2048):
    direction = flip_direction(p_base)
    samples = []
    for start in range(0, len(coalitions), chunk):
        block = coalitions[start : start + chunk]
        scores = backend.predict_batch([apply_substitutions(x, L) for L in block])
        for L, score in zip(block, scores):
            samples.append(CoalitionSample(L, direction * (score.p1 - p_base)))
    return samples


def sample_coalitions(
    proposal: CandidateProposal,
    locations: list[int],
    c_s: int,
    budget: int,
    seed: int,
    backend,
    x: TokenSequence,
    base_p1: float | None = None,
    enumerate_all: bool = False,
) -> list[CoalitionSample]:
    """Draw and evaluate *budget* size-``c_s`` coalitions over the filtered locations.

    Each draw picks ``c_s`` distinct locations uniformly, then one candidate
    uniformly from each location's list. Every draw derives its own random
    stream from ``(seed, draw_index)``, so any partition of the budget across
    workers reproduces the same samples. With ``enumerate_all`` the full
    coalition space is evaluated instead (budget and seed are ignored).
    """
    if not enumerate_all and budget < 1:
        raise ValueError("budget must be at least 1")
    if c_s > len(locations):
        raise ValueError("infeasible coalition size")
    cand_lists = _candidate_lists(proposal, locations)
    if base_p1 is None:
        base_p1 = backend.predict(x).p1

    if enumerate_all:
        if _count_coalitions(cand_lists, locations, c_s) > ORACLE_GUARD:
            raise ValueError("instance too large for oracle")
        coalitions = list(_all_coalitions(cand_lists, locations, c_s))
        return _evaluate_coalitions(coalitions, x, backend, base_p1)

    seed_norm = seed & 0xFFFFFFFFFFFFFFFF
    coalitions = []
    for draw in range(budget):
        rng = np.random.default_rng(np.random.SeedSequence([seed_norm, draw]))
        chosen = rng.choice(len(locations), size=c_s, replace=False)
        members = []
        for idx in sorted(int(i) for i in chosen):
            loc = locations[idx]
            cands = cand_lists[loc]
            members.append(Substitution(loc, cands[int(rng.integers(len(cands)))]))
        coalitions.append(Coalition.of(*members))
    return _evaluate_coalitions(coalitions, x, backend, base_p1)


def estimate_sv(samples: list[CoalitionSample], universe: list[Substitution]) -> ShapleyTable:
    """Shapley estimates from evaluated coalitions: mean value of coalitions
    containing a substitution minus mean value of those that do not.

    Substitutions never hit get value 0 with zero recorded hits; substitutions
    present in every sample take the complement mean as 0, flagged.
    """
    if not samples:
        raise ValueError("no coalition samples")
    universe_set = set(universe)
    n_samples = len(samples)
    total_value = 0.0
    hits: dict[Substitution, int] = {s: 0 for s in universe_set}
    sums: dict[Substitution, float] = {s: 0.0 for s in universe_set}
    c_s = len(next(iter(samples)).coalition)
    for sample in samples:
        total_value += sample.value
        for sub in sample.coalition:
            if sub not in universe_set:
                raise ValueError(f"sampled substitution {sub} outside the universe")
            hits[sub] += 1
            sums[sub] += sample.value

    estimates: dict[Substitution, SvEstimate] = {}
    for sub in universe_set:
        h = hits[sub]
        if h == 0:
            estimates[sub] = SvEstimate(sv=0.0, hits=0, flag="unsampled")
        elif h == n_samples:
            estimates[sub] = SvEstimate(sv=sums[sub] / h, hits=h, flag="in-all-samples")
        else:
            mean_in = sums[sub] / h
            mean_out = (total_value - sums[sub]) / (n_samples - h)
            estimates[sub] = SvEstimate(sv=mean_in - mean_out, hits=h)
    assert sum(e.hits for e in estimates.values()) == c_s * n_samples
    return ShapleyTable(estimates=estimates, c_s=c_s, samples=list(samples))


def brute_force_sv(
    proposal: CandidateProposal,
    locations: list[int],
    c_s: int,
    backend,
    x: TokenSequence,
    base_p1: float | None = None,
) -> ShapleyTable:
    """Exact fixed-size Shapley values by full enumeration of the coalition space.

    Kept deliberately independent of :func:`estimate_sv`: values are
    re-accumulated per substitution with a direct pass over every coalition.
    """
    if c_s > len(locations):
        raise ValueError("infeasible coalition size")
    cand_lists = _candidate_lists(proposal, locations)
    if _count_coalitions(cand_lists, locations, c_s) > ORACLE_GUARD:
        raise ValueError("instance too large for oracle")
    if base_p1 is None:
        base_p1 = backend.predict(x).p1
    coalitions = list(_all_coalitions(cand_lists, locations, c_s))
    samples = _evaluate_coalitions(coalitions, x, backend, base_p1)

    universe = [Substitution(loc, tok) for loc in locations for tok in cand_lists[loc]]
    estimates: dict[Substitution, SvEstimate] = {}
    for sub in universe:
        in_values = [s.value for s in samples if sub in s.coalition]
        out_values = [s.value for s in samples if sub not in s.coalition]
        if not in_values:
            estimates[sub] = SvEstimate(sv=0.0, hits=0, flag="unsampled")
            continue
        mean_in = sum(in_values) / len(in_values)
        if out_values:
            estimates[sub] = SvEstimate(sv=mean_in - sum(out_values) / len(out_values), hits=len(in_values))
        else:
            estimates[sub] = SvEstimate(sv=mean_in, hits=len(in_values), flag="in-all-samples")
    return ShapleyTable(estimates=estimates, c_s=c_s, samples=samples)
