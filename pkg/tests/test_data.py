import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llard.data import (
    DataError,
    Dataset,
    IndexBoundsError,
    InfeasibleNoiseError,
    InteractionRecord,
    SamplingError,
    TextCatalog,
    build_graph,
    graph_from_edges,
    inject_noise,
    kcore_filter,
    read_catalog,
    read_interactions,
    read_ledger,
    sample_triples,
    split_dataset,
    write_catalog,
    write_interactions,
    write_ledger,
)

from conftest import make_dataset, random_dataset


def brute_force_kcore(pairs, k):
    """Repeatedly delete every node below degree k until nothing changes."""
    edges = set(pairs)
    while True:
        udeg, ideg = {}, {}
        for u, i in edges:
            udeg[u] = udeg.get(u, 0) + 1
            ideg[i] = ideg.get(i, 0) + 1
        keep = {(u, i) for u, i in edges if udeg[u] >= k and ideg[i] >= k}
        if keep == edges:
            return edges
        edges = keep


def recs(pairs, rating=None):
    return [InteractionRecord(u, i, rating) for u, i in pairs]


pair_lists = st.lists(
    st.tuples(st.sampled_from([f"u{k}" for k in range(8)]), st.sampled_from([f"i{k}" for k in range(8)])),
    max_size=40,
)


class TestRecords:
    def test_rejects_empty_ids(self):
        with pytest.raises(DataError):
            InteractionRecord("", "i1")

    def test_rejects_rating_out_of_range(self):
        with pytest.raises(DataError):
            InteractionRecord("u", "i", 6)

    def test_read_reports_line_number(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t5\t10\nu2\ti2\nbroken\n")
        with pytest.raises(DataError, match="line 3"):
            read_interactions(p)

    def test_interactions_round_trip(self, tmp_path):
        rows = [InteractionRecord("a", "b", 4, 17), InteractionRecord("c", "d")]
        write_interactions(rows, tmp_path / "r.tsv")
        assert read_interactions(tmp_path / "r.tsv") == rows

    def test_catalog_round_trip(self, tmp_path):
        cat = TextCatalog(items={"i1": {"title": "T", "category": "C", "description": "D"}},
                          comments={("u1", "i1"): "good"}, user_notes={"u1": ["likes stuff"]})
        write_catalog(cat, tmp_path / "c.tsv")
        back = read_catalog(tmp_path / "c.tsv")
        assert back.items == cat.items and back.comments == cat.comments and back.user_notes == cat.user_notes

    def test_ledger_round_trip(self, tmp_path):
        pairs = np.array([[0, 3], [2, 1]])
        write_ledger(pairs, tmp_path / "l.tsv")
        assert np.array_equal(read_ledger(tmp_path / "l.tsv"), pairs)


class TestKCore:
    def test_two_user_example_matches_peeling_oracle(self):
        pairs = [("u1", "i1"), ("u1", "i2"), ("u1", "i3"), ("u2", "i1")]
        out = {(r.user_id, r.item_id) for r in kcore_filter(recs(pairs), 2)}
        assert out == brute_force_kcore(pairs, 2) == set()

    def test_k1_keeps_everything(self):
        pairs = [("u1", "i1"), ("u2", "i1"), ("u3", "i9")]
        assert kcore_filter(recs(pairs), 1) == recs(pairs)

    def test_low_ratings_removed(self):
        assert kcore_filter(recs([("u1", "i1"), ("u2", "i2")], rating=2), 1, min_rating=3) == []

    def test_unrated_records_survive_rating_filter(self):
        rows = [InteractionRecord("u1", "i1", None), InteractionRecord("u1", "i2", 1)]
        assert kcore_filter(rows, 1, min_rating=3) == rows[:1]

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            kcore_filter([], 0)

    @given(pair_lists, st.integers(1, 4))
    def test_matches_brute_force(self, pairs, k):
        out = {(r.user_id, r.item_id) for r in kcore_filter(recs(pairs), k)}
        assert out == brute_force_kcore(set(pairs), k)

    @given(pair_lists, st.integers(1, 4))
    def test_idempotent(self, pairs, k):
        once = kcore_filter(recs(pairs), k)
        assert kcore_filter(once, k) == once


class TestSplit:
    def test_five_interactions(self):
        ds = split_dataset(recs([("u", f"i{k}") for k in range(5)]))
        assert (len(ds.train), len(ds.val), len(ds.test)) == (3, 1, 1)

    def test_single_interaction_goes_to_train(self):
        ds = split_dataset(recs([("u", "i")]))
        assert (len(ds.train), len(ds.val), len(ds.test)) == (1, 0, 0)

    def test_deterministic(self):
        rows = recs([(f"u{k % 4}", f"i{k}") for k in range(40)])
        a, b = split_dataset(rows, seed=3), split_dataset(rows, seed=3)
        assert all(np.array_equal(getattr(a, s), getattr(b, s)) for s in ("train", "val", "test"))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            split_dataset([])

    @given(pair_lists.filter(bool), st.integers(0, 10))
    def test_partition_per_user(self, pairs, seed):
        ds = split_dataset(recs(pairs), seed=seed)
        got = {(ds.user_ids[u], ds.item_ids[i]) for part in (ds.train, ds.val, ds.test) for u, i in part}
        assert got == set(pairs)
        for u in range(ds.num_users):
            assert len(ds.train_items[u]) >= 1

    def test_overlapping_splits_rejected(self):
        with pytest.raises(DataError):
            make_dataset(1, 2, [(0, 0)], [(0, 0)])

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexBoundsError):
            make_dataset(1, 2, [(0, 5)])

    def test_save_load_is_byte_stable(self, tmp_path, rng):
        ds = random_dataset(rng, 6, 9)
        ds.save(tmp_path / "a.json")
        Dataset.load(tmp_path / "a.json").save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestGraph:
    def test_single_edge_entry_is_one(self):
        g = build_graph(make_dataset(1, 1, [(0, 0)]))
        assert g.adjacency[0, 1] == 1.0

    def test_degree_two_user(self):
        g = build_graph(make_dataset(1, 2, [(0, 0), (0, 1)]))
        assert g.adjacency[0, 1] == pytest.approx(2 ** -0.5, abs=1e-15)
        assert g.adjacency[0, 2] == pytest.approx(2 ** -0.5, abs=1e-15)

    def test_weighted_degree_normalization(self):
        g = graph_from_edges(1, 1, [(0, 1)], [0.25])
        assert g.adjacency[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_duplicates_collapse_to_max_weight(self):
        g = graph_from_edges(2, 1, [(0, 2), (2, 0), (0, 1)], [0.3, 0.7, 1.0])
        assert len(g.edges) == 2
        assert g.weights[list(map(tuple, g.edges)).index((0, 2))] == 0.7
        assert g.kinds.tolist() == [1, 0]

    def test_rejects_out_of_range(self):
        with pytest.raises(IndexBoundsError):
            graph_from_edges(1, 1, [(0, 2)])

    def test_rejects_self_loops_and_item_pairs(self):
        with pytest.raises(DataError):
            graph_from_edges(2, 2, [(0, 0)])
        with pytest.raises(DataError):
            graph_from_edges(2, 2, [(2, 3)])

    def test_isolated_node_has_zero_row(self):
        g = build_graph(make_dataset(2, 2, [(0, 0)]))
        assert g.adjacency[1].nnz == 0

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_symmetric_with_spectral_bound(self, seed):
        rng = np.random.default_rng(seed)
        nu, ni = int(rng.integers(1, 15)), int(rng.integers(1, 15))
        cand = [(u, nu + i) for u in range(nu) for i in range(ni)]
        cand += [(a, b) for a, b in itertools.combinations(range(nu), 2)]
        pick = rng.random(len(cand)) < 0.4
        edges = [e for e, p in zip(cand, pick) if p] or [cand[0]]
        g = graph_from_edges(nu, ni, edges, rng.uniform(0.01, 1, len(edges)))
        dense = g.adjacency.toarray()
        assert np.array_equal(dense, dense.T)
        assert np.abs(np.linalg.eigvalsh(dense)).max() <= 1 + 1e-10


class TestNoise:
    def test_exact_count_and_disjoint(self, rng):
        train = [(u, i) for u in range(40) for i in range(25)]
        ds = make_dataset(40, 200, train)
        assert len(ds.train) == 1000
        noisy = inject_noise(ds, 0.10, seed=1)
        assert len(noisy.train) == 1100 and len(noisy.noise_ledger) == 100
        assert not set(map(tuple, noisy.noise_ledger.tolist())) & set(train)
        assert np.array_equal(noisy.val, ds.val) and np.array_equal(noisy.test, ds.test)

    def test_deterministic(self, rng):
        ds = random_dataset(rng, 20, 30)
        a, b = inject_noise(ds, 0.05, seed=9), inject_noise(ds, 0.05, seed=9)
        assert np.array_equal(a.noise_ledger, b.noise_ledger)

    def test_dense_regime_uses_exact_draw(self):
        ds = make_dataset(3, 3, [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)])
        noisy = inject_noise(ds, 0.8, seed=0)
        assert len(noisy.noise_ledger) == 4

    def test_complete_graph_infeasible(self):
        ds = make_dataset(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)])
        with pytest.raises(InfeasibleNoiseError):
            inject_noise(ds, 0.5, seed=0)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.5))
    def test_ledger_exact(self, seed, ratio):
        ds = random_dataset(np.random.default_rng(seed), 12, 30, density=0.2)
        noisy = inject_noise(ds, ratio, seed)
        orig = set(map(tuple, np.concatenate([ds.train, ds.val, ds.test]).tolist()))
        assert len(noisy.noise_ledger) == int(np.floor(ratio * len(ds.train)))
        assert not set(map(tuple, noisy.noise_ledger.tolist())) & orig


class TestSampling:
    def test_forced_negative(self):
        ds = make_dataset(1, 2, [(0, 0)])
        b = sample_triples(ds, 50, 0)
        assert set(b.neg.tolist()) == {1}

    def test_batch_size(self, rng):
        assert sample_triples(random_dataset(rng, 10, 20), 1024, 0).size == 1024

    def test_uniform_negatives(self):
        ds = make_dataset(1, 5, [(0, 0), (0, 1)])
        negs = sample_triples(ds, 100_000, 7).neg
        freq = np.bincount(negs, minlength=5)[2:] / len(negs)
        assert np.all(np.abs(freq - 1 / 3) < 0.01)

    def test_saturated_users_skipped(self):
        ds = make_dataset(2, 2, [(0, 0), (0, 1), (1, 0)])
        b = sample_triples(ds, 200, 0)
        assert set(b.users.tolist()) == {1} and set(b.neg.tolist()) == {1}

    def test_all_saturated_error(self):
        with pytest.raises(SamplingError):
            sample_triples(make_dataset(1, 1, [(0, 0)]), 5, 0)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_triple_invariants(self, seed):
        ds = random_dataset(np.random.default_rng(seed), 8, 12)
        b = sample_triples(ds, 64, seed)
        train = set(map(tuple, ds.train.tolist()))
        for u, i, j in b.triples.tolist():
            assert (u, i) in train and (u, j) not in train
