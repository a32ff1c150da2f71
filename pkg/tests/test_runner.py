"""Experiment-runner behavior: parallelism, determinism, report emission."""

import json

from closs.evaluation import UniformScorer, run_config, run_experiment
from closs.search import SearchConfig, Strategy
from synthdata import dataset_from, trigger_texts


def small_suite(vocab, n=8, seed=321):
    texts, labels = trigger_texts(n, seed=seed)
    return dataset_from(texts, labels, vocab, "runner-suite")


class TestRunConfig:
    def test_worker_count_does_not_change_results(self, trigger_setup):
        vocab, _, backend = trigger_setup
        data = small_suite(vocab)
        cfg = SearchConfig(k=6, w=2, b=6, seed=11)
        serial = run_config(data, cfg, backend, jobs=1)
        parallel = run_config(data, cfg, backend, jobs=4)
        assert serial == parallel

    def test_per_input_seeds_are_fixed(self, trigger_setup):
        vocab, _, backend = trigger_setup
        data = small_suite(vocab)
        cfg = SearchConfig(k=6, w=2, b=6, seed=11)
        a = run_config(data, cfg, backend, jobs=1)
        b = run_config(data, cfg, backend, jobs=1)
        assert a == b


class TestRunExperiment:
    def test_writes_results_and_report(self, trigger_setup, tmp_path):
        vocab, _, backend = trigger_setup
        data = small_suite(vocab, n=5)
        cfgs = [SearchConfig(k=4, w=1, b=4, seed=s) for s in (1, 2, 3)]
        reports = run_experiment(data, cfgs, backend, tmp_path, scorer=UniformScorer(vocab.size))
        assert len(reports) == 3
        lines = (tmp_path / "results.jsonl").read_text().strip().splitlines()
        assert len(lines) == 15  # 3 configs x 5 inputs
        csv_lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 1 + 3 + 1  # header, three seed rows, one mean row
        assert csv_lines[-1].endswith(",mean")

    def test_single_config_single_row(self, trigger_setup, tmp_path):
        vocab, _, backend = trigger_setup
        data = small_suite(vocab, n=1)
        reports = run_experiment(data, [SearchConfig(k=4, w=1, b=4, seed=1)], backend, tmp_path)
        assert len(reports) == 1
        csv_lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 2  # header + one data row

    def test_multiple_strategies_grouped(self, trigger_setup, tmp_path):
        vocab, _, backend = trigger_setup
        data = small_suite(vocab, n=4)
        cfgs = [
            SearchConfig(k=4, w=1, b=4, seed=1, strategy=Strategy.CLOSS),
            SearchConfig(k=4, w=1, b=4, seed=1, strategy=Strategy.HOTFLIP_D),
        ]
        run_experiment(data, cfgs, backend, tmp_path)
        rows = (tmp_path / "report.csv").read_text().strip().splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["closs", "hotflip-d"]


class TestAbortMarker:
    def test_backend_failure_flushes_and_marks(self, trigger_setup, tmp_path):
        import pytest

        from closs.gateway import TransportError

        vocab, _, backend = trigger_setup
        data = small_suite(vocab, n=4)

        class FlakyBackend:
            """Delegates to the real backend, dies on the third input."""

            def __init__(self, inner):
                self.inner = inner
                self.fork_count = 0

            def fork(self):
                self.fork_count += 1
                if self.fork_count == 3:
                    raise TransportError("connection lost")
                return self.inner.fork()

        with pytest.raises(TransportError):
            run_experiment(data, [SearchConfig(k=4, w=1, b=4)], FlakyBackend(backend), tmp_path)
        lines = (tmp_path / "results.jsonl").read_text().strip().splitlines()
        # the two completed inputs were flushed before the abort marker
        assert json.loads(lines[-1]) == {"aborted": True, "error": "connection lost"}
        assert len(lines) == 3


class TestGenerateDeterminism:
    def test_identical_invocations_identical_bytes(self, trigger_setup, tmp_path):
        import hashlib

        from closs.cli import main
        from closs.toy_model import save_checkpoint

        vocab, _, backend = trigger_setup
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, backend.model, backend.retrained_head, backend.untrained_head)
        data = tmp_path / "d.jsonl"
        texts, labels = trigger_texts(6, seed=9)
        data.write_text("\n".join(json.dumps({"text": t, "label": l}) for t, l in zip(texts, labels)) + "\n")
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["generate", "--model", str(ckpt), "--data", str(data), "--out", str(out),
                         "--k", "4", "--w", "1", "--beam", "4", "--seed", "2"]) == 0
            digests.append(hashlib.sha256((out / "results.jsonl").read_bytes()).hexdigest())
        assert digests[0] == digests[1]
