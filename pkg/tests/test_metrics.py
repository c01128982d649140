"""Retrieval metrics against a brute-force oracle."""

import numpy as np
import pytest

from ofoh.errors import ContractError, ProtocolError, ShapeError
from ofoh.metrics import (cmc, export_embeddings, load_embeddings, map_score,
                          pairwise_distances, topk_retrieval, write_cmc_tsv)


def brute_force_cmc_map(dists, q_ids, q_cams, g_ids, g_cams, k_max):
    """Independent re-implementation: full per-query sort on (dist, index)."""
    n_q = dists.shape[0]
    curve = np.zeros(k_max)
    aps = []
    for i in range(n_q):
        entries = [(dists[i, j], j) for j in range(dists.shape[1])
                   if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        entries.sort()
        rel = [g_ids[j] == q_ids[i] for _, j in entries]
        first = rel.index(True)
        for k in range(first, k_max):
            curve[k] += 1.0
        hits = [r + 1 for r, flag in enumerate(rel) if flag]
        aps.append(np.mean([(n + 1) / rank for n, rank in enumerate(hits)]))
    return curve / n_q, float(np.mean(aps))


def random_instance(rng):
    n_q = int(rng.integers(1, 11))
    n_g = int(rng.integers(5, 51))
    n_ids = int(rng.integers(2, 6))
    n_cams = int(rng.integers(2, 4))
    g_ids = rng.integers(0, n_ids, size=n_g)
    g_cams = rng.integers(0, n_cams, size=n_g)
    q_ids = np.empty(n_q, dtype=np.int64)
    q_cams = np.empty(n_q, dtype=np.int64)
    for i in range(n_q):
        while True:
            qid = int(rng.integers(0, n_ids))
            qcam = int(rng.integers(0, n_cams))
            # ensure a valid match remains after exclusion
            if np.any((g_ids == qid) & (g_cams != qcam)):
                q_ids[i], q_cams[i] = qid, qcam
                break
    dists = rng.random((n_q, n_g))
    # exercise ties occasionally
    if n_g > 3 and rng.random() < 0.3:
        dists[:, 1] = dists[:, 0]
    return dists, q_ids, q_cams, g_ids, g_cams


class TestPairwise:
    def test_self_distance_zero(self):
        v = np.array([[1.0, 2.0, 3.0]])
        assert pairwise_distances(v, v)[0, 0] == 0.0

    def test_pythagorean(self):
        d = pairwise_distances(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        assert d[0, 0] == pytest.approx(5.0)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        d = pairwise_distances(rng.normal(size=(4, 6)), rng.normal(size=(9, 6)))
        assert (d >= 0.0).all()

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))


class TestCmc:
    def test_perfect_retrieval(self):
        dists = np.array([[0.1, 0.9], [0.9, 0.1]])
        curve = cmc(dists, [0, 1], [0, 0], [0, 1], [1, 1], 2)
        np.testing.assert_array_equal(curve, [1.0, 1.0])

    def test_rank_three_match(self):
        dists = np.array([[0.1, 0.2, 0.3, 0.4]])
        curve = cmc(dists, [7], [0], [1, 2, 7, 7], [1, 1, 1, 1], 4)
        np.testing.assert_array_equal(curve, [0.0, 0.0, 1.0, 1.0])

    def test_no_valid_match_named(self):
        dists = np.array([[0.5]])
        with pytest.raises(ProtocolError, match="query 0"):
            cmc(dists, [3], [1], [3], [1], 1)   # only match excluded

    def test_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            inst = random_instance(rng)
            curve = cmc(*inst, 10)
            assert (np.diff(curve) >= -1e-15).all()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            inst = random_instance(rng)
            k = min(10, inst[0].shape[1])
            curve = cmc(*inst, k)
            expected, _ = brute_force_cmc_map(*inst, k)
            np.testing.assert_allclose(curve, expected, atol=1e-12)


class TestMap:
    def test_all_relevant_first(self):
        dists = np.array([[0.1, 0.2, 0.9]])
        assert map_score(dists, [1], [0], [1, 1, 2], [1, 2, 1]) == \
            pytest.approx(1.0)

    def test_hand_average_precision(self):
        # relevant at ranks 1 and 3: AP = (1/1 + 2/3) / 2
        dists = np.array([[0.1, 0.2, 0.3]])
        ap = map_score(dists, [1], [0], [1, 2, 1], [1, 1, 1])
        assert ap == pytest.approx(5.0 / 6.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            inst = random_instance(rng)
            _, expected = brute_force_cmc_map(*inst, 1)
            assert map_score(*inst) == pytest.approx(expected, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(4, 8))
        g = rng.normal(size=(20, 8))
        q_ids = rng.integers(0, 3, 4)
        g_ids = np.concatenate([np.arange(3), rng.integers(0, 3, 17)])
        q_cams, g_cams = np.zeros(4, int), np.ones(20, int)
        base_d = pairwise_distances(q, g)
        base_cmc = cmc(base_d, q_ids, q_cams, g_ids, g_cams, 5)
        base_map = map_score(base_d, q_ids, q_cams, g_ids, g_cams)
        base_top = topk_retrieval(base_d, 5)
        for c in (0.25, 7.0):
            d = pairwise_distances(c * q, c * g)
            np.testing.assert_array_equal(
                cmc(d, q_ids, q_cams, g_ids, g_cams, 5), base_cmc)
            assert map_score(d, q_ids, q_cams, g_ids, g_cams) == \
                pytest.approx(base_map)
            assert topk_retrieval(d, 5) == base_top


class TestTopK:
    def test_k1_argmin(self):
        dists = np.array([[0.5, 0.1, 0.9], [0.2, 0.4, 0.05]])
        assert topk_retrieval(dists, 1) == [[1], [2]]

    def test_full_permutation(self):
        dists = np.random.default_rng(5).random((3, 6))
        for row in topk_retrieval(dists, 6):
            assert sorted(row) == list(range(6))

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            topk_retrieval(np.zeros((1, 3)), 4)

    def test_tie_break_by_index(self):
        dists = np.array([[0.5, 0.5, 0.1]])
        assert topk_retrieval(dists, 3) == [[2, 0, 1]]

    def test_agrees_with_cmc_ordering(self):
        rng = np.random.default_rng(6)
        inst = random_instance(rng)
        dists, q_ids, q_cams, g_ids, g_cams = inst
        lists = topk_retrieval(dists, dists.shape[1], q_ids, q_cams, g_ids,
                               g_cams)
        for i, ranked in enumerate(lists):
            rel = [g_ids[j] == q_ids[i] for j in ranked]
            first = rel.index(True) + 1
            curve = cmc(dists[i:i + 1], q_ids[i:i + 1], q_cams[i:i + 1],
                        g_ids, g_cams, dists.shape[1])
            assert curve[first - 1] == 1.0
            if first > 1:
                assert curve[first - 2] == 0.0


class TestEmbeddingsTsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        ids = rng.integers(0, 9, 12)
        cams = rng.integers(0, 3, 12)
        desc = rng.normal(size=(12, 5))
        path = tmp_path / "emb.tsv"
        export_embeddings(path, ids, cams, desc)
        ids2, cams2, desc2 = load_embeddings(path)
        np.testing.assert_array_equal(ids, ids2)
        np.testing.assert_array_equal(cams, cams2)
        np.testing.assert_array_equal(desc, desc2)   # %.17g round-trips floats

    def test_cmc_tsv_layout(self, tmp_path):
        write_cmc_tsv(tmp_path / "cmc.tsv", [0.5, 0.75, 1.0])
        lines = (tmp_path / "cmc.tsv").read_text().splitlines()
        assert lines[0] == "rank\taccuracy"
        assert lines[1].startswith("1\t0.5")
        assert len(lines) == 4
