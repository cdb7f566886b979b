import numpy as np
import pytest

from cmalign.retrieval import average_precision, bidirectional_map, cross_modal_map


def brute_force_ap(sim_row, gallery_labels, query_label):
    """Exhaustive AP: explicit sort with index tie-break, direct formula."""
    order = sorted(range(len(sim_row)), key=lambda c: (-sim_row[c], c))
    hits, precisions = 0, []
    for rank, c in enumerate(order, start=1):
        if gallery_labels[c] == query_label:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else None


class TestAveragePrecision:
    def test_all_relevant(self):
        assert average_precision([1, 1, 1, 1]) == 1.0

    def test_hand_case(self):
        # relevant at ranks 1 and 3 of 4, R=2 -> (1/1 + 2/3)/2
        assert abs(average_precision([1, 0, 1, 0]) - 0.8333333333333333) <= 1e-9

    def test_single_relevant_closed_form(self):
        for n in (1, 3, 7):
            for r in range(1, n + 1):
                rel = [0] * n
                rel[r - 1] = 1
                assert average_precision(rel) == pytest.approx(1.0 / r, abs=1e-12)

    def test_no_relevant_returns_none(self):
        assert average_precision([0, 0, 0]) is None

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_precision([])

    def test_monotone_in_rank_improvement(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = rng.integers(3, 12)
            rel = (rng.random(n) < 0.4).astype(int)
            if rel.sum() == 0 or rel.all():
                continue
            pos = [i for i in range(n) if rel[i] == 1 and i > 0 and rel[i - 1] == 0]
            if not pos:
                continue
            p = pos[0]
            improved = rel.copy()
            improved[p - 1], improved[p] = improved[p], improved[p - 1]
            assert average_precision(improved) >= average_precision(rel)


class TestCrossModalMap:
    def test_self_retrieval_unique_labels(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(6, 5))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        labels = np.arange(6)
        res = cross_modal_map(emb, emb, labels, labels)
        assert res.mean_ap == 1.0

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            q_n = rng.integers(1, 11)
            g_n = rng.integers(1, 11)
            k = rng.integers(2, 5)
            q = rng.normal(size=(q_n, 4))
            g = rng.normal(size=(g_n, 4))
            ql = rng.integers(0, k, size=q_n)
            gl = rng.integers(0, k, size=g_n)
            res = cross_modal_map(q, g, ql, gl)
            sims = q @ g.T
            expected = [brute_force_ap(sims[r], gl, ql[r]) for r in range(q_n)]
            defined = [e for e in expected if e is not None]
            for r, e in enumerate(expected):
                if e is None:
                    assert np.isnan(res.per_query_ap[r])
                else:
                    assert res.per_query_ap[r] == e
            if defined:
                assert res.mean_ap == pytest.approx(np.mean(defined), abs=1e-15)

    def test_random_embeddings_near_class_prior(self):
        rng = np.random.default_rng(3)
        k, q_n, g_n = 10, 200, 500
        q = rng.normal(size=(q_n, 16))
        g = rng.normal(size=(g_n, 16))
        ql = np.arange(q_n) % k
        gl = np.arange(g_n) % k
        res = cross_modal_map(q, g, ql, gl)
        assert abs(res.mean_ap - 1.0 / k) <= 0.03

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(8, 6))
        g = rng.normal(size=(12, 6))
        ql = rng.integers(0, 3, size=8)
        gl = rng.integers(0, 3, size=12)
        rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        base = cross_modal_map(q, g, ql, gl)
        rotated = cross_modal_map(q @ rot, g @ rot, ql, gl)
        assert abs(base.mean_ap - rotated.mean_ap) <= 1e-9
        np.testing.assert_allclose(base.per_query_ap, rotated.per_query_ap, atol=1e-9)

    def test_gallery_permutation_invariance_tie_free(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(5, 4))
        g = rng.normal(size=(9, 4))
        ql = rng.integers(0, 3, size=5)
        gl = rng.integers(0, 3, size=9)
        perm = rng.permutation(9)
        base = cross_modal_map(q, g, ql, gl)
        permuted = cross_modal_map(q, g[perm], ql, gl[perm])
        np.testing.assert_allclose(base.per_query_ap, permuted.per_query_ap, atol=1e-12)

    def test_tie_break_by_gallery_index(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.0], [1.0, 0.0]])  # identical similarities
        res = cross_modal_map(q, g, np.array([0]), np.array([1, 0]))
        # gallery 0 (label 1) outranks gallery 1 (label 0) on ties -> relevant at rank 2
        assert res.per_query_ap[0] == 0.5

    def test_empty_gallery_rejected(self):
        with pytest.raises(ValueError):
            cross_modal_map(np.ones((1, 2)), np.empty((0, 2)), np.array([0]), np.array([]))

    def test_bidirectional_report(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(7, 4))
        b = rng.normal(size=(7, 4))
        labels = rng.integers(0, 3, size=7)
        report = bidirectional_map(a, b, labels, labels)
        assert 0.0 <= report.map_1to2 <= 1.0
        assert 0.0 <= report.map_2to1 <= 1.0
        assert report.dir_1to2.n_queries == 7
        assert report.dir_2to1.n_gallery == 7
