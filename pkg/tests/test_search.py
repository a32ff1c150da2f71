import itertools

import numpy as np
import pytest

from closs.corpus import Coalition, Substitution, TokenSequence, apply_substitutions
from closs.search import (
    HOTFLIP_BEAM,
    SearchConfig,
    Strategy,
    _beam_search_ordered,
    beam_search,
    depth_limit,
    hotflip,
    run_strategy,
    sampling_budget,
)
from closs.shapley import round_half_up
from fakes import AdditiveBackend, LinearBackend, RecordingBackend


def seq(ids):
    return TokenSequence(ids=tuple(ids), raw_text="x", label=0)


def random_additive_instance(seed, n_locs=4, cands=2, base=0.42, scale=0.08):
    rng = np.random.default_rng(seed)
    original = tuple(range(100, 100 + n_locs))
    lists = {t: [200 + 10 * t + j for j in range(cands)] for t in range(n_locs)}
    effects = {(t, tok): float(rng.uniform(-scale, scale)) for t in range(n_locs) for tok in lists[t]}
    backend = AdditiveBackend(original, base, effects)
    universe = [Substitution(t, tok) for t in lists for tok in lists[t]]
    return backend, seq(original), lists, universe


def exhaustive_flip_exists(x, lists, depth_cap, backend, y_target):
    """Oracle: try every conflict-free substitution subset within the depth cap."""
    locs = sorted(lists)
    for size in range(1, depth_cap + 1):
        for loc_subset in itertools.combinations(locs, size):
            for tokens in itertools.product(*(lists[t] for t in loc_subset)):
                variant = apply_substitutions(
                    x, Coalition.of(*(Substitution(t, v) for t, v in zip(loc_subset, tokens)))
                )
                s = backend.predict(variant)
                p_t = s.p1 if y_target == 1 else 1.0 - s.p1
                if p_t > 0.5:
                    return True
    return False


class TestDepthLimit:
    def test_half_up(self):
        assert depth_limit(0.15, 57) == 9
        assert depth_limit(0.15, 10) == 2
        assert depth_limit(0.01, 10) == 1  # clamps to at least one edit


class TestBeamSearch:
    def test_unbounded_beam_matches_exhaustive_oracle(self):
        agreements = 0
        for trial in range(30):
            backend, x, lists, universe = random_additive_instance(trial)
            cfg = SearchConfig(b=None, c_max=0.5, strategy=Strategy.CLOSS)  # depth 2 on n=4
            rng = np.random.default_rng(trial)
            order = list(universe)
            rng.shuffle(order)
            result = _beam_search_ordered(x, order, cfg, backend, y_target=1, base_p1=0.42)
            oracle = exhaustive_flip_exists(x, lists, depth_limit(0.5, x.n), backend, 1)
            assert result.success == oracle
            agreements += 1
        assert agreements == 30

    def test_empty_candidate_table_fails_cleanly(self):
        backend, x, _, _ = random_additive_instance(0)
        cfg = SearchConfig()
        result = _beam_search_ordered(x, [], cfg, backend, y_target=1, base_p1=0.42)
        assert not result.success
        assert result.nodes_expanded == 0
        assert len(result.substitutions) == 0

    def test_already_flipped_input_returns_empty_success(self):
        backend, x, _, universe = random_additive_instance(1)
        cfg = SearchConfig()
        # target class 0 while the base score is 0.42: already classified as target
        result = _beam_search_ordered(x, universe, cfg, backend, y_target=0, base_p1=0.42)
        assert result.success
        assert len(result.substitutions) == 0
        assert result.counterfactual.ids == x.ids

    def test_no_coalition_evaluated_twice(self):
        inner, x, _, universe = random_additive_instance(3, n_locs=5, cands=2, base=0.2, scale=0.01)
        backend = RecordingBackend(inner)
        cfg = SearchConfig(b=4, c_max=0.6)
        _beam_search_ordered(x, universe, cfg, backend, y_target=1, base_p1=0.2)
        evaluated = [ids for batch in backend.batches for ids in batch]
        assert len(evaluated) == len(set(evaluated))

    def test_early_stop_soundness(self):
        for trial in range(10):
            backend, x, lists, universe = random_additive_instance(trial, scale=0.12)
            cfg = SearchConfig(b=5, c_max=0.5)
            result = _beam_search_ordered(x, universe, cfg, backend, y_target=1, base_p1=0.42)
            if result.success:
                assert backend.predict(result.counterfactual).label == 1
                assert len(result.substitutions) <= depth_limit(0.5, x.n)

    def test_beam_search_uses_table_order(self, trigger_setup):
        from closs.shapley import brute_force_sv

        vocab, data, backend = trigger_setup
        x = next(ex for ex in data if backend.predict(ex).label == 0)
        # k = |V| - 2 exhausts the vocabulary, so the planted trigger is proposable
        prop = backend.propose_candidates(x, 1, vocab.size - 2)
        locs = [0, 1]
        table = brute_force_sv(prop, locs, 1, backend, x)
        cfg = SearchConfig(b=5, c_max=0.2)
        result = beam_search(x, table, cfg, backend)
        assert result.success
        assert backend.predict(result.counterfactual).label == 1


class TestRunStrategy:
    def test_trigger_task_single_edit_flip(self, trigger_setup):
        vocab, data, backend = trigger_setup
        zonk = vocab.id_of("zonk")
        cfg = SearchConfig()
        # positive example: the only informative token is the planted trigger
        x = next(ex for ex in data if backend.predict(ex).label == 1)
        result = run_strategy(x, cfg, backend.fork())
        assert result.success
        (sub,) = list(result.substitutions)
        assert x.ids[sub.location] == zonk

    def test_reported_queries_equal_counter_delta(self, trigger_setup):
        _, data, backend = trigger_setup
        worker = backend.fork()
        x = data.examples[0]
        before = worker.counter.forward_queries
        result = run_strategy(x, SearchConfig(), worker)
        assert result.queries == worker.counter.forward_queries - before
        # base prediction + full sampling budget are part of the count
        assert result.queries >= 2 * 5 * 30 + 1

    def test_saliency_ordered_variant_skips_sampling(self, trigger_setup):
        _, data, backend = trigger_setup
        x = data.examples[0]
        sv_queries = run_strategy(x, SearchConfig(strategy=Strategy.CLOSS_SV), backend.fork()).queries
        full_queries = run_strategy(x, SearchConfig(strategy=Strategy.CLOSS), backend.fork()).queries
        assert full_queries >= 2 * 5 * 30 + 1
        assert sv_queries < 2 * 5 * 30

    def test_static_proposal_variant_runs_no_optimization(self, trigger_setup):
        _, data, backend = trigger_setup
        x = data.examples[0]
        worker = backend.fork()
        run_strategy(x, SearchConfig(strategy=Strategy.CLOSS_EO), worker)
        assert worker.counter.gradient_queries == 1  # saliency only, no descent steps
        worker2 = backend.fork()
        run_strategy(x, SearchConfig(strategy=Strategy.CLOSS, k=12), worker2)
        assert worker2.counter.gradient_queries == 1 + 12

    def test_unfit_head_variant_changes_only_the_head(self, trigger_setup):
        from closs.candidates import generate_candidates
        from closs.latent import optimize_embeddings

        _, data, backend = trigger_setup
        x = data.examples[0]
        # the trajectory is a function of the model alone, so the variant's
        # proposals must equal candidates generated from the same trajectory
        # with the unfit head
        traj = optimize_embeddings(backend.model, x, 1, 6, backend.step_size, backend.l1)
        expected = generate_candidates(traj, backend.model, backend.untrained_head, x, 6)
        variant = backend.proposal_variant(lm_head_mode="untrained")
        assert variant.propose_candidates(x, 1, 6).per_position == expected.per_position

    def test_determinism(self, trigger_setup):
        _, data, backend = trigger_setup
        x = data.examples[2]
        cfg = SearchConfig(seed=5)
        r1 = run_strategy(x, cfg, backend.fork())
        r2 = run_strategy(x, cfg, backend.fork())
        assert r1 == r2

    def test_budget_infeasible_construction_fails(self):
        # flipping requires two coordinated edits but the depth limit is one
        original = (100, 101, 102, 103)
        lists = [[200], [210], [220], [230]]
        effects = {(0, 200): 0.06, (1, 210): 0.06, (2, 220): -0.01, (3, 230): -0.01}
        backend = AdditiveBackend(original, 0.4, effects)
        x = seq(original)
        universe = [Substitution(t, lists[t][0]) for t in range(4)]
        cfg = SearchConfig(b=None, c_max=0.25)  # depth limit 1
        result = _beam_search_ordered(x, universe, cfg, backend, y_target=1, base_p1=0.4)
        assert not result.success
        # sanity: two edits would flip
        both = apply_substitutions(x, Coalition.of(universe[0], universe[1]))
        assert backend.predict(both).label == 1

    def test_everything_salient_widens_budget_when_scaled(self, trigger_setup):
        _, data, backend = trigger_setup
        x = data.examples[0]
        cfg = SearchConfig(everything_salient=True, scale_w_with_universe=True, k=4, w=2)
        m_default = max(1, round_half_up(cfg.c_max * x.n))
        expected = round_half_up(2 * cfg.w * cfg.k * x.n / m_default)
        assert sampling_budget(cfg, x.n, x.n) == expected
        result = run_strategy(x, cfg, backend.fork())
        assert result.queries >= expected


class TestHotflip:
    def test_linear_model_finds_optimal_single_substitution(self):
        rng = np.random.default_rng(8)
        vocab_size, dim, n = 12, 4, 5
        emb = rng.normal(scale=0.5, size=(vocab_size, dim))
        weights = rng.normal(scale=0.2, size=dim)
        ids = tuple(int(i) for i in rng.integers(1, vocab_size, n))
        backend = LinearBackend(emb, weights, bias=0.0)
        # recentre the bias so the base score sits just below the boundary
        base = backend._score(ids)
        backend.bias += 0.45 - base
        x = seq(ids)

        # true score change of every single substitution, by direct evaluation
        deltas = {}
        for t in range(n):
            for v in range(1, vocab_size):
                if v == ids[t]:
                    continue
                variant = ids[:t] + (v,) + ids[t + 1 :]
                deltas[(t, v)] = backend._score(variant) - 0.45
        best = max(deltas, key=lambda k: deltas[k])
        assert deltas[best] > 0.05  # a flipping single substitution exists

        cfg = SearchConfig(strategy=Strategy.HOTFLIP_O, c_max=0.5)
        result = hotflip(x, cfg, backend)
        assert result.success
        (sub,) = list(result.substitutions)
        # first-order estimates are exact for an affine score, so the search
        # must land on the argmax substitution
        assert (sub.location, sub.token) == best

    def test_surrogate_additivity_on_linear_model(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(scale=0.4, size=(10, 3))
        backend = LinearBackend(emb, rng.normal(scale=0.1, size=3), bias=0.4)
        ids = (1, 2, 3, 4)
        x = seq(ids)
        scores = backend.hotflip_scores(x, 1)
        subs = [Substitution(0, 5), Substitution(2, 7)]
        estimated = sum(scores[s.location, s.token] for s in subs)
        applied = apply_substitutions(x, Coalition.of(*subs))
        actual = backend._score(applied.ids) - backend._score(ids)
        assert estimated == pytest.approx(actual, abs=1e-12)

    def test_beam_widths_and_distinct_location_rule(self):
        rng = np.random.default_rng(4)
        vocab_size, dim, n = 30, 4, 8
        emb = rng.normal(scale=0.3, size=(vocab_size, dim))
        weights = rng.normal(scale=0.05, size=dim)
        ids = tuple(int(i) for i in rng.integers(1, vocab_size, n))
        for strategy in (Strategy.HOTFLIP_D, Strategy.HOTFLIP_O):
            inner = LinearBackend(emb, weights, bias=0.0)
            inner.bias += 0.2 - inner._score(ids)  # far from the boundary: no early stop
            backend = RecordingBackend(inner)
            cfg = SearchConfig(strategy=strategy, c_max=0.3)
            result = hotflip(seq(ids), cfg, backend)
            assert not result.success
            width = HOTFLIP_BEAM[strategy]
            for batch in backend.batches:
                assert len(batch) <= width
            level1 = backend.batches[0]
            changed = [tuple(t for t in range(n) if b[t] != ids[t]) for b in level1]
            assert all(len(c) == 1 for c in changed)
            if strategy is Strategy.HOTFLIP_O:
                # children of the common root must modify distinct locations
                assert len({c[0] for c in changed}) == len(changed)

    def test_hotflip_on_trigger_task(self, trigger_setup):
        _, data, backend = trigger_setup
        for strategy in (Strategy.HOTFLIP_D, Strategy.HOTFLIP_O):
            x = next(ex for ex in data if backend.predict(ex).label == 1)
            result = run_strategy(x, SearchConfig(strategy=strategy), backend.fork())
            assert result.success
            assert backend.predict(result.counterfactual).label == 0

    def test_requires_gradient_capability(self, trigger_setup):
        _, data, _ = trigger_setup
        backend = AdditiveBackend((100, 101), 0.4, {})
        from closs.gateway import UnsupportedCapabilityError

        with pytest.raises(UnsupportedCapabilityError):
            hotflip(seq((100, 101)), SearchConfig(strategy=Strategy.HOTFLIP_D), backend)

    def test_rejects_non_surrogate_strategy(self, trigger_setup):
        _, data, backend = trigger_setup
        with pytest.raises(ValueError):
            hotflip(data.examples[0], SearchConfig(strategy=Strategy.CLOSS), backend)
