import os
import threading

import numpy as np
import pytest

from vaultrag.errors import CorruptSnapshot, DimensionMismatch, DuplicateId, VaultError
from vaultrag.hnsw import ChunkRow, HnswIndex, HnswParams, Neighbor


def make_rng(seed=0):
    return np.random.default_rng(seed)


def unit_vectors(rng, n, dim):
    v = rng.standard_normal((n, dim)).astype(np.float32)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def build_index(vectors, record_of=lambda i: i % 50, dim=None, **params):
    idx = HnswIndex(HnswParams(dim=dim or vectors.shape[1], **params))
    for i, v in enumerate(vectors):
        idx.insert(ChunkRow(i, record_of(i), False, None, v, f"t{i}"))
    return idx


@pytest.fixture(scope="module")
def small_index():
    rng = make_rng(11)
    vectors = unit_vectors(rng, 1500, 32)
    return build_index(vectors), vectors


class TestInsert:
    def test_self_query_is_rank_one(self):
        rng = make_rng(1)
        vectors = unit_vectors(rng, 50, 16)
        idx = build_index(vectors, record_of=lambda i: i)
        for i in (0, 17, 49):
            top = idx.knn_filtered(vectors[i], 1, set(range(50)))
            assert top[0].id == i
            assert abs(top[0].score - 1.0) <= 1e-5

    def test_duplicate_id(self):
        rng = make_rng(2)
        v = unit_vectors(rng, 2, 16)
        idx = HnswIndex(HnswParams(dim=16))
        idx.insert(ChunkRow(7, 1, False, None, v[0], ""))
        with pytest.raises(DuplicateId):
            idx.insert(ChunkRow(7, 2, False, None, v[1], ""))

    def test_dimension_mismatch(self):
        idx = HnswIndex(HnswParams(dim=32))
        bad = unit_vectors(make_rng(3), 1, 16)[0]
        with pytest.raises(DimensionMismatch):
            idx.insert(ChunkRow(1, 1, False, None, bad, ""))
        with pytest.raises(DimensionMismatch):
            idx.knn_filtered(bad, 1, {1})
        with pytest.raises(DimensionMismatch):
            idx.brute_force_knn(bad, 1, {1})

    def test_unnormalized_rejected(self):
        idx = HnswIndex(HnswParams(dim=8))
        with pytest.raises(VaultError):
            idx.insert(ChunkRow(1, 1, False, None, np.full(8, 0.9, np.float32), ""))

    def test_count_after_bulk_insert(self):
        rng = make_rng(4)
        vectors = unit_vectors(rng, 500, 16)
        idx = build_index(vectors)
        assert len(idx) == 500

    def test_param_validation(self):
        with pytest.raises(ValueError):
            HnswParams(M=1)
        with pytest.raises(ValueError):
            HnswParams(dim=0)
        with pytest.raises(ValueError):
            HnswParams(ef_search=0)


class TestKnnFiltered:
    def test_empty_allowed_set(self, small_index):
        idx, vectors = small_index
        assert idx.knn_filtered(vectors[0], 5, set()) == []

    def test_single_accessible_vector(self, small_index):
        idx, vectors = small_index
        # record 3 holds chunk ids 3, 53, 103, ...; any query must stay inside
        got = idx.knn_filtered(vectors[700], 5, {3})
        assert got
        assert all(idx.get_row(n.id).record_id == 3 for n in got)

    def test_all_results_in_allowed(self, small_index):
        idx, vectors = small_index
        rng = make_rng(5)
        for _ in range(25):
            allowed = set(rng.choice(50, size=rng.integers(1, 20), replace=False).tolist())
            q = unit_vectors(rng, 1, 32)[0]
            for n in idx.knn_filtered(q, 10, allowed):
                assert idx.get_row(n.id).record_id in allowed

    def test_scores_sorted_with_id_tiebreak(self, small_index):
        idx, vectors = small_index
        got = idx.knn_filtered(vectors[10], 40, set(range(50)))
        keys = [(-n.score, n.id) for n in got]
        assert keys == sorted(keys)

    def test_k_larger_than_matches(self, small_index):
        idx, _ = small_index
        q = unit_vectors(make_rng(6), 1, 32)[0]
        got = idx.knn_filtered(q, 1000, {0})
        assert len(got) == 30  # 1500 chunks over 50 records

    def test_recall_against_oracle(self, small_index):
        idx, _ = small_index
        rng = make_rng(7)
        queries = unit_vectors(rng, 100, 32)
        recalls = []
        for q in queries:
            approx = {n.id for n in idx.knn_filtered(q, 10, set(range(50)))}
            exact = {n.id for n in idx.brute_force_knn(q, 10, set(range(50)))}
            recalls.append(len(approx & exact) / 10)
        assert float(np.mean(recalls)) >= 0.9

    def test_recall_monotone_in_ef_search(self):
        rng = make_rng(8)
        vectors = unit_vectors(rng, 1200, 32)
        queries = unit_vectors(rng, 100, 32)
        allowed = set(range(50))
        means = []
        for ef in (10, 60, 300):
            idx = build_index(vectors, ef_search=ef)
            exact_idx = idx
            recalls = []
            for q in queries:
                approx = {n.id for n in idx.knn_filtered(q, 10, allowed)}
                exact = {n.id for n in exact_idx.brute_force_knn(q, 10, allowed)}
                recalls.append(len(approx & exact) / 10)
            means.append(float(np.mean(recalls)))
        assert means[0] <= means[1] + 1e-9
        assert means[1] <= means[2] + 1e-9

    def test_exhaustive_ef_matches_oracle(self):
        rng = make_rng(9)
        vectors = unit_vectors(rng, 200, 24)
        idx = build_index(vectors, ef_search=200)
        for q in unit_vectors(rng, 20, 24):
            approx = {n.id for n in idx.knn_filtered(q, 10, set(range(50)))}
            exact = {n.id for n in idx.brute_force_knn(q, 10, set(range(50)))}
            assert approx == exact

    def test_determinism_across_builds(self):
        rng = make_rng(10)
        vectors = unit_vectors(rng, 400, 24)
        a = build_index(vectors)
        b = build_index(vectors)
        for q in unit_vectors(rng, 10, 24):
            ra = [(n.id, n.score) for n in a.knn_filtered(q, 20, set(range(50)))]
            rb = [(n.id, n.score) for n in b.knn_filtered(q, 20, set(range(50)))]
            assert ra == rb


class TestBruteForce:
    def test_few_allowed_rows_returned_sorted(self):
        rng = make_rng(12)
        vectors = unit_vectors(rng, 30, 16)
        idx = build_index(vectors, record_of=lambda i: i)
        q = unit_vectors(rng, 1, 16)[0]
        got = idx.brute_force_knn(q, 50, {1, 2, 3})
        assert {n.id for n in got} == {1, 2, 3}
        keys = [(-n.score, n.id) for n in got]
        assert keys == sorted(keys)

    def test_identical_vectors_tie_by_id(self):
        v = unit_vectors(make_rng(13), 1, 16)[0]
        idx = HnswIndex(HnswParams(dim=16))
        for chunk_id in (9, 4, 6):
            idx.insert(ChunkRow(chunk_id, chunk_id, False, None, v.copy(), ""))
        got = idx.brute_force_knn(v, 3, {9, 4, 6})
        assert [n.id for n in got] == [4, 6, 9]
        # Graph search computes the entry node's score on a different BLAS
        # path, so equal vectors may differ in the last float32 ulp; the
        # ordering rule still applies to the computed scores.
        got = idx.knn_filtered(v, 3, {9, 4, 6})
        assert {n.id for n in got} == {4, 6, 9}
        keys = [(-n.score, n.id) for n in got]
        assert keys == sorted(keys)

    def test_matches_independent_numpy_ranking(self):
        rng = make_rng(14)
        vectors = unit_vectors(rng, 300, 16)
        idx = build_index(vectors, record_of=lambda i: i % 7)
        q = unit_vectors(rng, 1, 16)[0]
        allowed = {1, 4}
        got = [n.id for n in idx.brute_force_knn(q, 10, allowed)]
        sims = vectors @ q
        eligible = [i for i in range(300) if i % 7 in allowed]
        expected = sorted(eligible, key=lambda i: (-float(sims[i]), i))[:10]
        assert got == expected


class TestDelete:
    def test_delete_absent_record(self):
        idx = HnswIndex(HnswParams(dim=8))
        assert idx.delete_by_record(42) == 0

    def test_delete_removes_all_chunks(self):
        rng = make_rng(15)
        vectors = unit_vectors(rng, 40, 16)
        idx = HnswIndex(HnswParams(dim=16))
        for i in range(40):
            idx.insert(ChunkRow(i, 7 if i < 5 else 8, False, None, vectors[i], ""))
        assert idx.delete_by_record(7) == 5
        assert idx.knn_filtered(vectors[0], 10, {7}) == []
        assert len(idx) == 35

    def test_interleaved_ops_match_shadow_map(self):
        rng = make_rng(16)
        idx = HnswIndex(HnswParams(dim=16))
        shadow = {}
        next_id = 0
        for step in range(400):
            if shadow and rng.random() < 0.3:
                rid = int(rng.choice(sorted({r for r, _ in shadow.values()})))
                removed = idx.delete_by_record(rid)
                expected = [cid for cid, (r, _) in shadow.items() if r == rid]
                assert removed == len(expected)
                for cid in expected:
                    del shadow[cid]
            else:
                v = unit_vectors(rng, 1, 16)[0]
                rid = int(rng.integers(0, 12))
                idx.insert(ChunkRow(next_id, rid, False, None, v, ""))
                shadow[next_id] = (rid, v)
                next_id += 1
        assert set(idx.ids()) == set(shadow)
        # retrievability equals the shadow for a few probes
        for q in unit_vectors(rng, 5, 16):
            got = {n.id for n in idx.brute_force_knn(q, 10_000, set(range(12)))}
            assert got == set(shadow)

    def test_delete_ids_subset(self):
        rng = make_rng(17)
        vectors = unit_vectors(rng, 10, 16)
        idx = HnswIndex(HnswParams(dim=16))
        for i in range(10):
            idx.insert(ChunkRow(i, 1, False, None, vectors[i], ""))
        assert idx.delete_ids([2, 4, 99]) == 2
        assert set(idx.ids()) == {0, 1, 3, 5, 6, 7, 8, 9}
        assert idx.delete_by_record(1) == 8

    def test_compaction_preserves_results(self):
        rng = make_rng(18)
        vectors = unit_vectors(rng, 300, 16)
        idx = build_index(vectors, record_of=lambda i: i % 10)
        # removing 4 of 10 records crosses the 30% tombstone threshold
        for rid in (0, 1, 2, 3):
            idx.delete_by_record(rid)
        assert len(idx) == 180
        q = unit_vectors(rng, 1, 16)[0]
        got = {n.id for n in idx.knn_filtered(q, 200, set(range(10)))}
        assert got == {i for i in range(300) if i % 10 >= 4}


class TestReassignRecordIds:
    def test_relabel_changes_filtering_only(self):
        rng = make_rng(19)
        vectors = unit_vectors(rng, 100, 16)
        idx = build_index(vectors, record_of=lambda i: 0)
        q = unit_vectors(rng, 1, 16)[0]
        before = [n.id for n in idx.knn_filtered(q, 20, {0})]
        idx.reassign_record_ids(lambda chunk_id: chunk_id % 2)
        assert idx.record_ids() == {0, 1}
        after_all = [n.id for n in idx.knn_filtered(q, 20, {0, 1})]
        assert after_all == before
        evens = idx.knn_filtered(q, 20, {0})
        assert all(n.id % 2 == 0 for n in evens)


class TestMemoryReport:
    def test_empty_index(self):
        report = HnswIndex(HnswParams(dim=16)).memory_report()
        assert report == {
            "graph_bytes": 64,
            "rows_bytes": 0,
            "total_bytes": 64,
            "vector_count": 0,
        }

    def test_rows_lower_bound_and_total(self):
        rng = make_rng(20)
        vectors = unit_vectors(rng, 200, 64)
        idx = build_index(vectors)
        report = idx.memory_report()
        assert report["vector_count"] == 200
        assert report["rows_bytes"] >= 64 * 4 * 200
        assert report["total_bytes"] == report["graph_bytes"] + report["rows_bytes"]

    def test_marginal_cost_stable(self):
        rng = make_rng(21)
        vectors = unit_vectors(rng, 3000, 16)
        idx = HnswIndex(HnswParams(dim=16))
        costs = []
        checkpoints = {1000, 3000}
        for i, v in enumerate(vectors, start=1):
            idx.insert(ChunkRow(i, i % 20, False, None, v, ""))
            if i in checkpoints:
                r = idx.memory_report()
                costs.append(r["total_bytes"] / r["vector_count"])
        assert abs(costs[1] - costs[0]) / costs[0] < 0.10


class TestSnapshot:
    def test_round_trip_identical_results(self, tmp_path):
        rng = make_rng(22)
        vectors = unit_vectors(rng, 250, 24)
        idx = build_index(vectors)
        idx.delete_by_record(3)
        path = str(tmp_path / "index.bin")
        idx.snapshot(path)

        fresh = HnswIndex()
        fresh.restore(path)
        assert fresh.params.dim == 24
        for q in unit_vectors(rng, 10, 24):
            a = [(n.id, n.score) for n in idx.knn_filtered(q, 25, set(range(50)))]
            b = [(n.id, n.score) for n in fresh.knn_filtered(q, 25, set(range(50)))]
            assert a == b
        assert fresh.memory_report() == idx.memory_report()

    def test_checksum_mismatch(self, tmp_path):
        rng = make_rng(23)
        idx = build_index(unit_vectors(rng, 20, 16))
        path = str(tmp_path / "index.bin")
        idx.snapshot(path)
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CorruptSnapshot):
            HnswIndex().restore(path)

    def test_truncated_snapshot(self, tmp_path):
        path = str(tmp_path / "index.bin")
        open(path, "wb").write(b"VR")
        with pytest.raises(CorruptSnapshot):
            HnswIndex().restore(path)

    def test_missing_file(self, tmp_path):
        from vaultrag.errors import IoFailure

        with pytest.raises(IoFailure):
            HnswIndex().restore(str(tmp_path / "nope.bin"))


class TestConcurrency:
    def test_readers_during_writes(self):
        rng = make_rng(24)
        vectors = unit_vectors(rng, 400, 16)
        idx = build_index(vectors[:100], record_of=lambda i: i % 5)
        queries = unit_vectors(rng, 20, 16)
        errors = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                try:
                    for q in queries:
                        for n in idx.knn_filtered(q, 5, {0, 1}):
                            assert idx.get_row(n.id).record_id in {0, 1}
                except Exception as exc:  # surfaced after join
                    errors.append(exc)
                    return

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for i in range(100, 400):
            idx.insert(ChunkRow(i, i % 5, False, None, vectors[i], ""))
        stop.set()
        for t in threads:
            t.join()
        assert not errors
        assert len(idx) == 400


def test_neighbor_is_value_type():
    assert Neighbor(1, 0.5) == Neighbor(1, 0.5)
