import numpy as np
import pytest

from finid.catalogue import (
    CatalogueEntry,
    CatalogueStore,
    consistency_check,
    group_encounter,
    kmeans,
    match,
    store_load,
    store_save,
)
from finid.data import ImageRecord
from finid.errors import StoreError

from oracles import consistency_flags_loops, knn_identity_scores_loops

FP_A = "a" * 64
FP_B = "b" * 64


def _store(n_entries=12, n_identities=4, dim=5, seed=0, fingerprint=FP_A):
    rng = np.random.default_rng(seed)
    store = CatalogueStore(dim=dim, fingerprint=fingerprint)
    records = []
    embs = []
    for i in range(n_entries):
        ident = f"id{i % n_identities}"
        records.append(ImageRecord(f"img{i:03d}", ident, "2013-04-01", np.zeros((1, 2, 2))))
        embs.append(rng.normal(size=dim))
    store.add(records, np.stack(embs), fingerprint)
    return store


class TestStoreIO:
    def test_add_then_roundtrip(self, tmp_path):
        store = _store()
        path = str(tmp_path / "c.finstore")
        store_save(store, path)
        loaded = store_load(path)
        assert loaded.dim == store.dim
        assert loaded.fingerprint == store.fingerprint
        assert len(loaded) == len(store)
        for a, b in zip(store.entries, loaded.entries):
            assert (a.image_id, a.identity_id, a.date) == (b.image_id, b.identity_id, b.date)
            assert np.array_equal(a.embedding, b.embedding)

    def test_save_is_deterministic(self, tmp_path):
        store = _store()
        p1, p2 = str(tmp_path / "a.finstore"), str(tmp_path / "b.finstore")
        store_save(store, p1)
        store_save(store, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_wrong_dimension_rejected(self):
        store = _store(dim=5)
        rec = ImageRecord("new", "idx", "2013-04-02", np.zeros((1, 2, 2)))
        with pytest.raises(StoreError, match="dimension"):
            store.add([rec], np.zeros((1, 7)), FP_A)

    def test_wrong_fingerprint_rejected(self):
        store = _store()
        rec = ImageRecord("new", "idx", "2013-04-02", np.zeros((1, 2, 2)))
        with pytest.raises(StoreError, match="fingerprint"):
            store.add([rec], np.zeros((1, 5)), FP_B)

    def test_duplicate_image_id_rejected(self):
        store = _store()
        rec = ImageRecord("img000", "idx", "2013-04-02", np.zeros((1, 2, 2)))
        with pytest.raises(StoreError, match="img000"):
            store.add([rec], np.zeros((1, 5)), FP_A)

    def test_truncated_store_rejected(self, tmp_path):
        store = _store()
        path = str(tmp_path / "c.finstore")
        store_save(store, path)
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(raw[:-10])
        with pytest.raises(StoreError):
            store_load(path)

    def test_overlong_id_rejected(self):
        store = CatalogueStore(dim=2, fingerprint=FP_A)
        rec = ImageRecord("x" * 80, "idx", "2013-04-02", np.zeros((1, 2, 2)))
        with pytest.raises(StoreError, match="utf-8"):
            store.add([rec], np.zeros((1, 2)), FP_A)


class TestMatch:
    def test_single_identity_store(self):
        store = CatalogueStore(dim=2, fingerprint=FP_A)
        recs = [ImageRecord(f"i{j}", "only", "2013-04-01", np.zeros((1, 2, 2))) for j in range(3)]
        store.add(recs, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]), FP_A)
        result = match(store, np.array([0.9, 0.0]), k_ids=3)
        assert len(result.items) == 1
        assert result.items[0].identity_id == "only"
        assert result.items[0].distance == pytest.approx(0.1)

    def test_exact_hit_first_with_zero_distance(self):
        store = _store()
        target = store.entries[5]
        result = match(store, target.embedding.copy(), k_ids=3)
        assert result.items[0].identity_id == target.identity_id
        assert result.items[0].distance == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_scan_oracle(self):
        store = _store(n_entries=100, n_identities=10, dim=6, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = rng.normal(size=6)
            result = match(store, q, k_ids=10)
            oracle = knn_identity_scores_loops(
                [(e.identity_id, e.embedding) for e in store.entries], q
            )
            assert [i.identity_id for i in result.items] == [i for i, _ in oracle]
            for item, (_, d) in zip(result.items, oracle):
                assert item.distance == pytest.approx(d, abs=1e-12)

    def test_distances_nondecreasing_and_identities_distinct(self):
        store = _store(n_entries=40, n_identities=8, seed=5)
        result = match(store, np.zeros(5), k_ids=8)
        dists = [i.distance for i in result.items]
        assert dists == sorted(dists)
        idents = [i.identity_id for i in result.items]
        assert len(set(idents)) == len(idents)

    def test_empty_store_rejected(self):
        store = CatalogueStore(dim=3, fingerprint=FP_A)
        with pytest.raises(StoreError, match="empty"):
            match(store, np.zeros(3), k_ids=1)

    def test_appending_outscored_identities_keeps_head(self):
        store = CatalogueStore(dim=2, fingerprint=FP_A)
        recs = [
            ImageRecord("a0", "a", "2013-04-01", np.zeros((1, 2, 2))),
            ImageRecord("b0", "b", "2013-04-01", np.zeros((1, 2, 2))),
        ]
        store.add(recs, np.array([[0.1, 0.0], [5.0, 0.0]]), FP_A)
        head = match(store, np.zeros(2), k_ids=1).items[0]
        far = [ImageRecord("c0", "c", "2013-04-01", np.zeros((1, 2, 2)))]
        store.add(far, np.array([[9.0, 9.0]]), FP_A)
        again = match(store, np.zeros(2), k_ids=1).items[0]
        assert (head.identity_id, head.distance) == (again.identity_id, again.distance)


class TestKMeans:
    def test_two_separated_blobs(self):
        rng = np.random.default_rng(6)
        sigma = 0.1
        a = rng.normal(0.0, sigma, size=(20, 3))
        b = rng.normal(0.0, sigma, size=(20, 3)) + 100.0 * sigma  # blobs 100 sigma apart
        x = np.vstack([a, b])
        labels = group_encounter(x, 2, np.random.default_rng(7))
        assert len(set(labels[:20])) == 1
        assert len(set(labels[20:])) == 1
        assert labels[0] != labels[20]

    def test_k_equals_n_zero_inertia(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(7, 2))
        assignments, centers, history = kmeans(x, 7, np.random.default_rng(9))
        assert sorted(assignments) == list(range(7))
        assert history[-1] == pytest.approx(0.0, abs=1e-20)

    def test_converged_state_is_fixed_point(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(30, 4))
        a1, centers, _ = kmeans(x, 3, np.random.default_rng(11))
        # one more assignment pass from the converged centers changes nothing
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(d2.argmin(axis=1), a1)

    def test_inertia_nonincreasing(self):
        rng = np.random.default_rng(12)
        for seed in range(10):
            x = rng.normal(size=(50, 5))
            _, _, history = kmeans(x, 4, np.random.default_rng(100 + seed))
            assert all(a >= b - 1e-9 for a, b in zip(history, history[1:]))

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(StoreError):
            kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))

    def test_deterministic_given_rng(self):
        x = np.random.default_rng(13).normal(size=(40, 3))
        a1 = group_encounter(x, 5, np.random.default_rng(14))
        a2 = group_encounter(x, 5, np.random.default_rng(14))
        assert np.array_equal(a1, a2)


class TestConsistency:
    def test_far_apart_singletons_no_flags(self):
        store = CatalogueStore(dim=2, fingerprint=FP_A)
        recs = [ImageRecord(f"i{j}", f"id{j}", "2013-04-01", np.zeros((1, 2, 2))) for j in range(4)]
        store.add(recs, np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]]), FP_A)
        flags = consistency_check(store, intra_threshold=1.0, inter_threshold=1.0)
        assert flags == []

    def test_duplicate_under_two_identities_flagged(self):
        store = CatalogueStore(dim=2, fingerprint=FP_A)
        recs = [
            ImageRecord("i0", "ida", "2013-04-01", np.zeros((1, 2, 2))),
            ImageRecord("i1", "idb", "2013-04-01", np.zeros((1, 2, 2))),
        ]
        store.add(recs, np.array([[1.0, 1.0], [1.0, 1.0]]), FP_A)
        flags = consistency_check(store, intra_threshold=5.0, inter_threshold=0.5)
        assert len(flags) == 1
        assert flags[0].kind == "inter_near"
        assert {flags[0].image_a, flags[0].image_b} == {"i0", "i1"}

    def test_matches_quadratic_oracle(self):
        store = _store(n_entries=40, n_identities=6, seed=15)
        intra, inter = 2.5, 2.0
        flags = consistency_check(store, intra_threshold=intra, inter_threshold=inter)
        got = {(f.kind, f.image_a, f.image_b) for f in flags}
        expected = consistency_flags_loops(
            [(e.image_id, e.identity_id, e.embedding) for e in store.entries], intra, inter
        )
        assert got == expected

    def test_deterministic_and_pair_sorted(self):
        store = _store(n_entries=30, n_identities=5, seed=16)
        f1 = consistency_check(store, intra_threshold=2.0, inter_threshold=2.0)
        f2 = consistency_check(store, intra_threshold=2.0, inter_threshold=2.0)
        assert f1 == f2
        for f in f1:
            assert f.image_a < f.image_b

    def test_default_thresholds_from_percentiles(self):
        store = _store(n_entries=60, n_identities=6, seed=17)
        flags = consistency_check(store)
        # 95th/5th percentile defaults flag roughly 5% of each pair class
        assert isinstance(flags, list)
        assert all(f.kind in ("intra_far", "inter_near") for f in flags)
        assert len(flags) > 0

    def test_bad_thresholds_rejected(self):
        store = _store()
        with pytest.raises(StoreError):
            consistency_check(store, intra_threshold=-1.0)
