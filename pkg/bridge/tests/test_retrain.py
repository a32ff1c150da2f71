import json

import pytest
import torch

from closs_hf_bridge.cli import main
from closs_hf_bridge.model import BridgeModel, load_head
from closs_hf_bridge.retrain import head_token_loss, retrain_head

CORPUS = [
    "alpha bravo charlie delta echo",
    "foxtrot golf hotel india juliet",
    "alpha bravo zonk delta echo",
    "kilo lima mike november oscar",
    "papa quebec romeo sierra tango",
    "foxtrot golf zap india juliet",
] * 4


@pytest.fixture(scope="module")
def shim():
    return BridgeModel.shim(seed=0)


class TestRetrainHead:
    def test_lowers_token_loss_vs_pretrained(self, shim):
        before = head_token_loss(shim, shim.heads["pretrained"], CORPUS)
        head = retrain_head(shim, CORPUS, seed=1, epochs=200, lr=0.5)
        after = head_token_loss(shim, head, CORPUS)
        assert after < before

    def test_deterministic_given_seed(self, shim):
        h1 = retrain_head(shim, CORPUS, seed=2, epochs=30, lr=0.5)
        h2 = retrain_head(shim, CORPUS, seed=2, epochs=30, lr=0.5)
        for a, b in zip(h1.state_dict().values(), h2.state_dict().values()):
            assert torch.equal(a, b)

    def test_head_output_shape_matches_protocol(self, shim):
        head = retrain_head(shim, CORPUS, seed=0, epochs=10, lr=0.5)
        ids = shim.encode(CORPUS[0])
        hidden = shim.encoder(input_ids=torch.tensor([ids])).last_hidden_state
        logits = head(hidden)[0]
        assert logits.shape == (len(ids), shim.vocab_size)

    def test_save_load_roundtrip(self, shim, tmp_path):
        from closs_hf_bridge.model import save_head

        head = retrain_head(shim, CORPUS, seed=3, epochs=10, lr=0.5)
        path = tmp_path / "head.pt"
        save_head(path, head)
        loaded = load_head(path)
        for a, b in zip(head.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)

    def test_empty_corpus_rejected(self, shim):
        with pytest.raises(ValueError):
            retrain_head(shim, [], seed=0)


class TestRetrainCli:
    def test_end_to_end(self, tmp_path, capsys):
        data = tmp_path / "corpus.jsonl"
        with data.open("w") as fh:
            for text in CORPUS:
                fh.write(json.dumps({"text": text, "label": 0}) + "\n")
        out = tmp_path / "head.pt"
        code = main(["retrain-head", "--shim", "--data", str(data), "--out", str(out),
                     "--epochs", "50", "--seed", "1"])
        captured = capsys.readouterr()
        assert code == 0
        assert out.exists()
        assert "->" in captured.out

    def test_served_with_retrained_head(self, tmp_path):
        # a retrained head changes the proposals relative to the pretrained one
        shim = BridgeModel.shim(seed=0)
        head = retrain_head(shim, CORPUS, seed=1, epochs=200, lr=0.5)
        ids = shim.encode("alpha bravo charlie delta echo")
        base = shim.propose(ids, 1, 4)
        shim.with_head("retrained", head)
        shim.head_mode = "retrained"
        refit = shim.propose(ids, 1, 4)
        assert base != refit
