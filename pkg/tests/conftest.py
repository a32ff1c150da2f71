import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import multi_trigger_texts, trained_multi_setup, trained_trigger_setup


@pytest.fixture(scope="session")
def trigger_setup():
    """Trained planted-trigger task: (vocab, dataset, backend)."""
    return trained_trigger_setup()


@pytest.fixture(scope="session")
def multi_setup():
    """Trained three-trigger count task: (vocab, dataset, backend)."""
    return trained_multi_setup()


@pytest.fixture(scope="session")
def multi_eval_suite(multi_setup):
    """100 held-out inputs for the three-trigger task."""
    from synthdata import dataset_from

    vocab, _, _ = multi_setup
    texts, labels = multi_trigger_texts(100, seed=99)
    return dataset_from(texts, labels, vocab, "multi-eval")
