"""Sampler tests: neighbor draws, biased walks, negatives, histories.

The walk transition rule is validated two ways: empirical frequencies against
the normalized two-case weights on a fixed fixture, and ranked contexts
against a brute-force visit counter on recorded walks.
"""

import collections

import numpy as np
import pytest

from kgrec.graph import InputError, InteractionStore, KnowledgeGraph, Triple
from kgrec.sampling import (WalkCache, WalkConfig, build_walk_cache,
                            nonlocal_context, rank_walk_visits, run_walks,
                            sample_bpr_tuples, sample_history,
                            sample_kg_negatives, sample_local_neighbors,
                            substream, walk_step)

import synth


def test_substreams_are_deterministic_and_distinct():
    a = substream(7, "walks").integers(0, 1 << 30, size=4)
    b = substream(7, "walks").integers(0, 1 << 30, size=4)
    c = substream(7, "negatives").integers(0, 1 << 30, size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_walk_config_validation():
    with pytest.raises(InputError):
        WalkConfig(gamma=0.5)
    with pytest.raises(InputError):
        WalkConfig(gamma=0.0)
    with pytest.raises(InputError):
        WalkConfig(num_walks=0)


# ---------------------------------------------------------------------------
# local neighbor sampling
# ---------------------------------------------------------------------------


def test_sample_exact_degree_returns_all_neighbors():
    kg = synth.star_kg(4)
    got = sample_local_neighbors(kg, 0, 4, np.random.default_rng(0))
    assert sorted(got) == kg.local_context(0)


def test_sample_with_replacement_when_degree_short():
    kg = KnowledgeGraph(2, 1, [Triple(0, 0, 1)])
    got = sample_local_neighbors(kg, 0, 4, np.random.default_rng(0))
    assert got == [(0, 1)] * 4


def test_isolated_entity_falls_back_to_self_loops():
    kg = KnowledgeGraph(3, 1, [Triple(0, 0, 1)])
    got = sample_local_neighbors(kg, 2, 2, np.random.default_rng(0))
    assert got == [(kg.self_relation, 2), (kg.self_relation, 2)]


def test_neighbor_sampling_is_seed_deterministic():
    kg = synth.star_kg(8)
    a = sample_local_neighbors(kg, 0, 3, np.random.default_rng(5))
    b = sample_local_neighbors(kg, 0, 3, np.random.default_rng(5))
    assert a == b


# ---------------------------------------------------------------------------
# biased walk transitions
# ---------------------------------------------------------------------------


def _freqs(kg, prev, cur, gamma, n, seed=0):
    rng = np.random.default_rng(seed)
    counts = collections.Counter(walk_step(kg, prev, cur, gamma, rng)
                                 for _ in range(n))
    return {e: c / n for e, c in counts.items()}


def _assert_within_3_sigma(freqs, expected, n):
    for entity, p in expected.items():
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(freqs.get(entity, 0.0) - p) <= 3 * sigma, (entity, freqs, expected)


def test_first_step_is_uniform():
    kg = synth.star_kg(3)
    n = 30000
    freqs = _freqs(kg, None, 0, 0.2, n)
    _assert_within_3_sigma(freqs, {1: 1 / 3, 2: 1 / 3, 3: 1 / 3}, n)


def test_two_candidate_weights():
    # b's neighbors are {a, c}; c is not adjacent to a, so P(a)=gamma, P(c)=1-gamma
    kg = synth.chain_kg()
    n = 30000
    freqs = _freqs(kg, 0, 1, 0.2, n)
    _assert_within_3_sigma(freqs, {0: 0.2, 2: 0.8}, n)


def test_all_candidates_near_previous_is_uniform():
    # triangle: both of b's neighbors touch a
    kg = KnowledgeGraph(3, 1, [Triple(0, 0, 1), Triple(1, 0, 2), Triple(2, 0, 0)])
    n = 30000
    freqs = _freqs(kg, 0, 1, 0.2, n)
    _assert_within_3_sigma(freqs, {0: 0.5, 2: 0.5}, n)


def five_node_fixture():
    """cur=1 has neighbors {0, 2, 3}: 0 is prev, 2 neighbors prev, 3 does not."""
    triples = [Triple(0, 0, 1), Triple(1, 1, 2), Triple(1, 2, 3), Triple(0, 3, 2),
               Triple(3, 0, 4)]
    return KnowledgeGraph(5, 4, triples)


def test_transition_frequencies_match_normalized_weights():
    kg = five_node_fixture()
    gamma = 0.2
    # unnormalized weights (0.2, 0.2, 0.8) -> (1/6, 1/6, 2/3)
    expected = {0: 1 / 6, 2: 1 / 6, 3: 2 / 3}
    n = 100_000
    freqs = _freqs(kg, 0, 1, gamma, n, seed=11)
    _assert_within_3_sigma(freqs, expected, n)


def test_stuck_walker_stays_put():
    kg = KnowledgeGraph(3, 1, [Triple(0, 0, 1)])
    assert walk_step(kg, None, 2, 0.2, np.random.default_rng(0)) == 2


# ---------------------------------------------------------------------------
# walks and ranked contexts
# ---------------------------------------------------------------------------


def test_run_walks_shapes_and_adjacency():
    rng = np.random.default_rng(3)
    kg = synth.random_kg(rng, 10, 2, 25)
    cfg = WalkConfig(gamma=0.2, num_walks=15, walk_length=8, context_size=4)
    root = 0
    paths = run_walks(kg, root, cfg, np.random.default_rng(1))
    assert len(paths) == 15 and all(len(p) == 8 for p in paths)
    assert sum(len(p) for p in paths) == 120
    for path in paths:
        prev = root
        for step in path:
            assert kg.is_neighbor(prev, step) or step == prev
            prev = step


def test_two_node_walk_stays_in_component():
    kg = KnowledgeGraph(2, 1, [Triple(0, 0, 1)])
    cfg = WalkConfig(gamma=0.2, num_walks=3, walk_length=6, context_size=2)
    for path in run_walks(kg, 0, cfg, np.random.default_rng(2)):
        assert set(path) <= {0, 1}


def test_walks_are_seed_deterministic():
    rng = np.random.default_rng(4)
    kg = synth.random_kg(rng, 8, 2, 20)
    cfg = WalkConfig(gamma=0.3, num_walks=5, walk_length=4, context_size=2)
    assert run_walks(kg, 1, cfg, np.random.default_rng(9)) == \
        run_walks(kg, 1, cfg, np.random.default_rng(9))


def test_rank_breaks_ties_by_entity_index():
    paths = [[2] * 7 + [1] * 7 + [3] * 3]
    assert rank_walk_visits(paths, root=0, size=2) == [1, 2]


def test_rank_excludes_root():
    paths = [[0] * 50 + [4] * 3]
    assert rank_walk_visits(paths, root=0, size=2) == [4]


def test_nonlocal_context_matches_brute_force_counter():
    cfg = WalkConfig(gamma=0.25, num_walks=6, walk_length=5, context_size=3)
    meta_rng = np.random.default_rng(77)
    for trial in range(100):
        kg = synth.random_kg(meta_rng)
        root = int(meta_rng.integers(kg.entity_count))
        seed = int(meta_rng.integers(1 << 30))
        paths = run_walks(kg, root, cfg, np.random.default_rng(seed))
        got = nonlocal_context(kg, root, cfg, np.random.default_rng(seed))
        counter = collections.Counter()
        for path in paths:
            for entity in path:
                if entity != root:
                    counter[entity] += 1
        expected = [e for e, _ in sorted(counter.items(),
                                         key=lambda kv: (-kv[1], kv[0]))][:cfg.context_size]
        assert got == expected, f"trial {trial}"


# ---------------------------------------------------------------------------
# walk cache
# ---------------------------------------------------------------------------


def test_cache_has_one_entry_per_item():
    kg = synth.star_kg(6)
    cache = build_walk_cache(kg, np.array([1, 2, 3]), WalkConfig(0.2, 3, 3, 2), seed=5)
    assert cache.item_count == 3


def test_cache_rebuild_is_bit_identical(tmp_path):
    rng = np.random.default_rng(6)
    kg = synth.random_kg(rng, 12, 2, 30)
    items = np.arange(6)
    cfg = WalkConfig(0.2, 4, 4, 3)
    a = build_walk_cache(kg, items, cfg, seed=21)
    b = build_walk_cache(kg, items, cfg, seed=21)
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    a.save(pa)
    b.save(pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_parallel_cache_build_matches_serial():
    rng = np.random.default_rng(8)
    kg = synth.random_kg(rng, 12, 2, 30)
    items = np.arange(8)
    cfg = WalkConfig(0.2, 4, 4, 3)
    serial = build_walk_cache(kg, items, cfg, seed=13)
    parallel = build_walk_cache(kg, items, cfg, seed=13, workers=2)
    for i in range(8):
        np.testing.assert_array_equal(serial.context(i), parallel.context(i))


def test_wellconnected_items_fill_the_context():
    # complete-ish graph: every entity near every other
    triples = [Triple(h, 0, t) for h in range(5) for t in range(5) if h != t]
    kg = KnowledgeGraph(5, 1, triples)
    cfg = WalkConfig(0.2, 15, 8, 4)
    cache = build_walk_cache(kg, np.arange(5), cfg, seed=3)
    assert all(len(cache.context(i)) == 4 for i in range(5))


def test_cache_contexts_never_contain_their_root():
    rng = np.random.default_rng(12)
    for _ in range(10):
        kg = synth.random_kg(rng)
        n_items = min(4, kg.entity_count)
        item_entities = np.arange(n_items)
        cache = build_walk_cache(kg, item_entities, WalkConfig(0.2, 5, 4, 3),
                                 seed=int(rng.integers(1 << 20)))
        for item in range(n_items):
            assert item_entities[item] not in cache.context(item)


def test_cache_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    kg = synth.random_kg(rng, 10, 2, 20)
    cfg = WalkConfig(0.3, 3, 4, 2)
    cache = build_walk_cache(kg, np.arange(4), cfg, seed=17)
    path = tmp_path / "cache.bin"
    cache.save(path)
    loaded = WalkCache.load(path)
    assert loaded.context_size == 2 and loaded.seed == 17
    assert loaded.gamma == pytest.approx(0.3)
    for i in range(4):
        np.testing.assert_array_equal(loaded.context(i), cache.context(i))


def test_cache_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(InputError, match="not a walk cache"):
        WalkCache.load(path)


# ---------------------------------------------------------------------------
# ranking negatives
# ---------------------------------------------------------------------------


def test_bpr_emits_n_neg_tuples_per_interaction():
    store = InteractionStore(1, 10, {"train": [(0, 3)]})
    tuples = sample_bpr_tuples(store, 5, np.random.default_rng(0))
    assert len(tuples) == 5
    assert all(t[:2] == (0, 3) for t in tuples)


def test_bpr_negative_is_forced_with_two_items():
    store = InteractionStore(1, 2, {"train": [(0, 0)]})
    tuples = sample_bpr_tuples(store, 5, np.random.default_rng(0))
    assert all(t[2] == 1 for t in tuples)


def test_bpr_negatives_never_hit_train_positives():
    rng = np.random.default_rng(14)
    store = synth.random_store(rng, n_users=6, n_items=9, per_user=4)
    for u, _, neg in sample_bpr_tuples(store, 5, rng):
        assert neg not in store.positives(u, "train")


def test_bpr_negatives_distinct_when_pool_allows():
    store = InteractionStore(1, 20, {"train": [(0, 0)]})
    tuples = sample_bpr_tuples(store, 5, np.random.default_rng(1))
    negs = [t[2] for t in tuples]
    assert len(set(negs)) == 5


def test_bpr_skips_user_owning_every_item():
    store = InteractionStore(1, 2, {"train": [(0, 0), (0, 1)]})
    with pytest.warns(UserWarning, match="every item"):
        tuples = sample_bpr_tuples(store, 5, np.random.default_rng(0))
    assert tuples == []


# ---------------------------------------------------------------------------
# graph negatives
# ---------------------------------------------------------------------------


def test_kg_negative_constraints_exhaustively():
    rng = np.random.default_rng(15)
    for _ in range(20):
        kg = synth.random_kg(rng)
        quads = sample_kg_negatives(kg, rng)
        assert len(quads) <= len(kg.triples)
        for h, r, t, neg in quads:
            assert neg != h
            assert not kg.is_neighbor(h, neg)


def test_kg_negatives_cover_every_triple_when_possible():
    kg = KnowledgeGraph(5, 1, [Triple(0, 0, 1), Triple(2, 0, 3)])
    quads = sample_kg_negatives(kg, np.random.default_rng(0))
    assert len(quads) == 2


def test_kg_negative_small_candidate_pool():
    # head 0 is adjacent to 1 and 2; only 3 and 4 remain
    kg = KnowledgeGraph(5, 1, [Triple(0, 0, 1), Triple(0, 0, 2)])
    rng = np.random.default_rng(0)
    for _ in range(50):
        for _, _, _, neg in sample_kg_negatives(kg, rng):
            assert neg in (3, 4)


def test_kg_negative_skips_fully_connected_head():
    triples = [Triple(0, 0, 1), Triple(0, 0, 2), Triple(1, 0, 2)]
    kg = KnowledgeGraph(3, 1, triples)
    with pytest.warns(UserWarning, match="neighbors every entity"):
        quads = sample_kg_negatives(kg, np.random.default_rng(0))
    assert all(h != 0 for h, _, _, _ in quads)


# ---------------------------------------------------------------------------
# history sampling
# ---------------------------------------------------------------------------


def test_history_distinct_and_excludes_target():
    pairs = [(0, i) for i in range(20)]
    store = InteractionStore(1, 20, {"train": pairs})
    got = sample_history(store, 0, exclude=7, size=16, rng=np.random.default_rng(0))
    assert len(got) == 16
    assert len(set(got)) == 16
    assert 7 not in got


def test_history_with_replacement_when_pool_short():
    store = InteractionStore(1, 20, {"train": [(0, 1), (0, 2), (0, 3)]})
    got = sample_history(store, 0, exclude=None, size=16, rng=np.random.default_rng(0))
    assert len(got) == 16
    assert set(got) <= {1, 2, 3}


def test_history_empty_pool_returns_marker():
    store = InteractionStore(2, 5, {"train": [(0, 1)]})
    assert sample_history(store, 1, None, 4, np.random.default_rng(0)) == []
    assert sample_history(store, 0, 1, 4, np.random.default_rng(0)) == []
