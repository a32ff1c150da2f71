"""Sparse optimization of input embeddings toward a target class.

Proximal gradient descent on the classifier's cross-entropy against the
target, with the L1 penalty applied to the displacement from the original
embeddings via per-coordinate soft-thresholding. Every intermediate embedding
matrix is kept, since the downstream candidate generation consumes the whole
step trajectory rather than a single optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import TokenSequence
from .toy_model import ToyClassifier, cross_entropy, forward_from_embeddings, grad_wrt_embeddings


@dataclass(frozen=True)
class Trajectory:
    """The original embedding matrix plus one optimized matrix per step."""

    origin: np.ndarray
    steps: tuple[np.ndarray, ...] = field(default_factory=tuple)
    losses: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.steps) != len(self.losses):
            raise ValueError("steps and losses must have equal length")
        self.origin.setflags(write=False)
        for m in self.steps:
            m.setflags(write=False)

    def __len__(self) -> int:
        return len(self.steps)


def soft_threshold(z: np.ndarray, threshold: float) -> np.ndarray:
    """Shrink every coordinate toward zero by *threshold*, clipping at zero."""
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def optimize_embeddings(
    model: ToyClassifier,
    x: TokenSequence,
    y_target: int,
    k: int,
    step_size: float = 0.1,
    l1: float = 0.01,
) -> Trajectory:
    """Run *k* proximal gradient steps from the embedding of *x* toward *y_target*.

    Each step takes a plain gradient step on the cross-entropy and then
    soft-thresholds the displacement from the original embeddings, so the
    edit stays sparse in embedding space. The recorded loss per step is the
    cross-entropy plus ``l1`` times the L1 norm of the displacement.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if l1 < 0:
        raise ValueError("l1 must be non-negative")
    origin = model.embed(x.ids)
    current = origin.copy()
    steps: list[np.ndarray] = []
    losses: list[float] = []
    for step in range(1, k + 1):
        grad = grad_wrt_embeddings(model, current, y_target)
        moved = current - step_size * grad
        displacement = soft_threshold(moved - origin, step_size * l1)
        current = origin + displacement
        score = forward_from_embeddings(model, current)
        loss = cross_entropy(score, y_target) + l1 * float(np.abs(displacement).sum())
        if not np.isfinite(loss):
            raise RuntimeError(f"optimization diverged at step {step}")
        steps.append(current.copy())
        losses.append(loss)
    return Trajectory(origin=origin.copy(), steps=tuple(steps), losses=tuple(losses))
