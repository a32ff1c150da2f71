"""Fit a replacement LM head on the classifier's own encoder states.

The fine-tuned encoder defines the latent space the embedding optimization
moves through; a head fit against that space proposes tokens matching the
target corpus distribution rather than generic text.
"""

from __future__ import annotations

import torch
from torch import nn

from .model import BridgeModel


@torch.no_grad()
def _collect_states(model: BridgeModel, texts: list[str]):
    states, targets = [], []
    for text in texts:
        ids = model.encode(text)
        if not ids:
            continue
        batch = torch.tensor([ids], device=model.device)
        hidden = model.encoder(input_ids=batch).last_hidden_state[0]
        states.append(hidden)
        targets.extend(ids)
    if not states:
        raise ValueError("corpus produced no usable tokens")
    return torch.cat(states, dim=0), torch.tensor(targets, device=model.device)


def head_token_loss(model: BridgeModel, head: nn.Module, texts: list[str]) -> float:
    """Mean cross-entropy of the head predicting each token from its state."""
    X, y = _collect_states(model, texts)
    with torch.no_grad():
        return float(nn.functional.cross_entropy(head(X), y))


def retrain_head(model: BridgeModel, texts: list[str], seed: int = 0,
                 epochs: int = 200, lr: float = 0.5) -> nn.Linear:
    """Softmax regression from encoder states to token ids over the corpus."""
    X, y = _collect_states(model, texts)
    torch.manual_seed(seed)
    head = nn.Linear(X.shape[1], model.vocab_size).to(model.device)
    optimizer = torch.optim.SGD(head.parameters(), lr=lr)
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss = nn.functional.cross_entropy(head(X), y)
        if not torch.isfinite(loss):
            raise RuntimeError(f"head fitting diverged at epoch {epoch}")
        loss.backward()
        optimizer.step()
    return head.eval()
