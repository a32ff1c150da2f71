"""Wire-protocol server exposing transformer classifiers (and a tiny
deterministic shim) to the counterfactual generation engine."""

__version__ = "0.1.0"

from .model import BridgeModel, WordTokenizer, load_head, save_head
from .retrain import head_token_loss, retrain_head

__all__ = [
    "BridgeModel",
    "WordTokenizer",
    "load_head",
    "save_head",
    "head_token_loss",
    "retrain_head",
    "__version__",
]
