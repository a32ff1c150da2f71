"""Ranked candidate substitutions per position, derived from token logit matrices.

Each optimization step contributes one logit matrix; positions accumulate one
new candidate per matrix, always the highest-scoring token not yet taken and
never the original token or the unknown token. Candidate lists therefore grow
in step order and are stable prefixes of longer runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import UNK_ID, TokenSequence
from .latent import Trajectory
from .toy_model import LMHead, ToyClassifier, lm_logits


@dataclass(frozen=True)
class CandidateProposal:
    """Ordered candidate token ids per input position.

    ``steps`` records, when known, the 1-based index of the logit matrix that
    contributed each candidate; it is diagnostic only and absent for remote
    proposals.
    """

    per_position: tuple[tuple[int, ...], ...]
    steps: tuple[tuple[int, ...], ...] | None = None

    @property
    def n(self) -> int:
        return len(self.per_position)


def select_candidates(
    matrices: list[np.ndarray],
    original_ids: tuple[int, ...],
    vocab_size: int,
    k: int,
) -> CandidateProposal:
    """Accumulate up to *k* candidates per position from successive logit matrices.

    At iteration ``i`` the token with the highest logit in matrix ``i`` is
    added at each position, excluding the original token, the unknown token
    and all previous selections. Ties go to the lowest token id. Lists are
    capped at ``vocab_size - 2`` entries.
    """
    if len(matrices) < k:
        raise ValueError(f"need {k} logit matrices, got {len(matrices)}")
    n = len(original_ids)
    capacity = max(0, vocab_size - 2)
    chosen: list[list[int]] = [[] for _ in range(n)]
    chosen_steps: list[list[int]] = [[] for _ in range(n)]
    taken: list[set[int]] = [{original_ids[t], UNK_ID} for t in range(n)]
    for step_idx in range(k):
        mat = matrices[step_idx]
        if mat.shape != (vocab_size, n):
            raise ValueError(f"logit matrix {step_idx + 1} has shape {mat.shape}, expected {(vocab_size, n)}")
        for t in range(n):
            if len(chosen[t]) >= capacity:
                continue
            col = mat[:, t].copy()
            col[list(taken[t])] = -np.inf
            best = int(np.argmax(col))  # argmax takes the lowest id on ties
            if not np.isfinite(col[best]):
                continue
            chosen[t].append(best)
            chosen_steps[t].append(step_idx + 1)
            taken[t].add(best)
    return CandidateProposal(
        per_position=tuple(tuple(c) for c in chosen),
        steps=tuple(tuple(s) for s in chosen_steps),
    )


def generate_candidates(
    traj: Trajectory,
    model: ToyClassifier,
    head: LMHead,
    x: TokenSequence,
    k: int,
) -> CandidateProposal:
    """Candidates from the logit matrices of every trajectory step."""
    if len(traj) != k:
        raise ValueError(f"trajectory has {len(traj)} steps, expected {k}")
    matrices = [lm_logits(model, head, E) for E in traj.steps]
    return select_candidates(matrices, x.ids, model.vocab.size, k)


def static_candidates(
    model: ToyClassifier,
    head: LMHead,
    x: TokenSequence,
    k: int,
) -> CandidateProposal:
    """Candidates from the original embedding only: the top-k masked logits
    per position, equivalent to iterating selection over one repeated matrix."""
    mat = lm_logits(model, head, model.embed(x.ids))
    return select_candidates([mat] * k, x.ids, model.vocab.size, k)
