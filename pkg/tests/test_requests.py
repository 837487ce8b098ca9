import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dui.datasets import DatasetTable, make_synthetic, make_synthetic_graph
from dui.requests import (EmptyRetainedSetError, UnlearnRequest, apply, label_histogram_shift, random_request,
                          topk_request)


@pytest.fixture
def hand_table():
    return DatasetTable(np.array([[1.0, 9.0], [2.0, 8.0], [3.0, 7.0], [4.0, 6.0]]), np.array([0, 1, 0, 1]), 2)


class TestRandomRequest:
    def test_ratio_zero_is_empty(self, caplog):
        r = random_request(make_synthetic(20, 3), 0.0)
        assert r.is_empty
        assert "selects nothing" in caplog.text

    def test_seed_determinism(self):
        data = make_synthetic(50, 4)
        a = random_request(data, 0.2, mode="feature_values", seed=3, feature_ratio=0.5)
        b = random_request(data, 0.2, mode="feature_values", seed=3, feature_ratio=0.5)
        assert a.to_text() == b.to_text()

    def test_five_of_hundred(self):
        r = random_request(make_synthetic(100, 3), 0.05, seed=1)
        assert r.point_indices.size == 5
        assert np.all(np.diff(r.point_indices) > 0)

    def test_feature_values_counts(self):
        r = random_request(make_synthetic(40, 10), 0.25, mode="feature_values", seed=2, feature_ratio=0.3)
        # 3 features x 10 cells
        assert r.cells.shape == (30, 2)
        assert np.unique(r.cells[:, 1]).size == 3

    def test_candidates_restrict_rows(self):
        data = make_synthetic(40, 3)
        pool = np.arange(0, 40, 2)
        r = random_request(data, 0.5, seed=0, candidates=pool)
        assert r.point_indices.size == 10 and set(r.point_indices) <= set(pool)


class TestTopkRequest:
    def test_hand_ranked(self, hand_table):
        r = topk_request(hand_table, 0.5, feature_ratio=0.5)
        np.testing.assert_array_equal(r.cells, [[0, 1], [1, 1]])

    def test_ratio_zero_is_empty(self, hand_table):
        assert topk_request(hand_table, 0.0, feature_ratio=1.0).cells.shape == (0, 2)

    def test_ties_go_to_lower_row(self):
        t = DatasetTable(np.full((5, 1), 2.0), np.zeros(5, dtype=int), 2)
        np.testing.assert_array_equal(topk_request(t, 0.4).cells, [[0, 0], [1, 0]])

    def test_points_mode_takes_top_rows(self, hand_table):
        # feature 1 is kept; the largest values sit in rows 0 and 1
        r = topk_request(hand_table, 0.5, feature_ratio=0.5, mode="points")
        np.testing.assert_array_equal(r.point_indices, [0, 1])

    @given(st.integers(0, 1000), st.floats(0.0, 0.9), st.floats(0.1, 1.0), st.integers(-6, 6))
    def test_cell_count_and_scale_invariance_with_ties(self, seed, ratio, fratio, power):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 5, size=(12, 5)).astype(float)
        t = DatasetTable(X, np.zeros(12, dtype=int), 2)
        r = topk_request(t, ratio, feature_ratio=fratio)
        n_feat, k = int(np.floor(5 * fratio + 1e-9)), int(np.floor(12 * ratio + 1e-9))
        assert r.cells.shape[0] == n_feat * k
        # powers of two scale exactly, so tied sums stay tied
        r2 = topk_request(t.with_features(X * 2.0**power), ratio, feature_ratio=fratio)
        np.testing.assert_array_equal(r.cells, r2.cells)

    @given(st.integers(0, 1000), st.floats(0.05, 0.9), st.floats(0.01, 100.0))
    def test_scale_invariance_continuous(self, seed, ratio, scale):
        X = np.random.default_rng(seed).random((15, 6))
        t = DatasetTable(X, np.zeros(15, dtype=int), 2)
        r = topk_request(t, ratio, feature_ratio=0.5)
        np.testing.assert_array_equal(r.cells, topk_request(t.with_features(X * scale), ratio, 0.5).cells)

    def test_class_correlated_feature_skews_labels(self):
        data = make_synthetic(400, 5, 2, seed=0, separation=3.0)
        r = topk_request(data, 0.1, feature_ratio=0.2)
        assert label_histogram_shift(data, r.rows) > 0.1


class TestSerialization:
    @pytest.mark.parametrize("mode", ["points", "feature_values"])
    def test_round_trip(self, mode):
        data = make_synthetic(30, 4)
        r = random_request(data, 0.2, mode=mode, seed=5, feature_ratio=0.5, replacement="feature_mean")
        back = UnlearnRequest.from_text(r.to_text())
        assert back.digest() == r.digest()
        assert back.to_text() == r.to_text()

    def test_bad_header(self):
        with pytest.raises(ValueError):
            UnlearnRequest.from_text("something else\n")

    def test_canonical_sorting(self):
        a = UnlearnRequest("points", "random", 0.1, point_indices=[3, 1, 1])
        np.testing.assert_array_equal(a.point_indices, [1, 3])


class TestApply:
    def test_empty_request_is_identity(self, hand_table):
        ap = apply(hand_table, topk_request(hand_table, 0.0))
        assert ap.retained is hand_table and ap.delta_rows.size == 0

    def test_points_remove_row_zero(self):
        t = DatasetTable(np.array([[0.0], [1.0], [2.0]]), np.array([0, 1, 0]), 2)
        ap = apply(t, UnlearnRequest("points", "random", 0.3, point_indices=[0]))
        np.testing.assert_array_equal(ap.retained.features[:, 0], [1.0, 2.0])
        np.testing.assert_array_equal(ap.remap([0, 1, 2]), [0, 1])

    def test_feature_cell_zeroed(self, hand_table):
        ap = apply(hand_table, UnlearnRequest("feature_values", "top_k", 0.25, cells=[[2, 1]]))
        diff = ap.original_rows != ap.perturbed_rows
        np.testing.assert_array_equal(diff, [[False, True]])
        assert ap.retained.features[2, 1] == 0.0 and ap.retained.n == 4
        np.testing.assert_array_equal(ap.retained.labels, hand_table.labels)

    def test_feature_mean_replacement(self, hand_table):
        req = UnlearnRequest("feature_values", "top_k", 0.25, cells=[[0, 0]], replacement="feature_mean")
        assert apply(hand_table, req).retained.features[0, 0] == 2.5

    def test_remove_everything(self, hand_table):
        with pytest.raises(EmptyRetainedSetError, match="empty retained set"):
            apply(hand_table, UnlearnRequest("points", "random", 0.5, point_indices=[0, 1, 2, 3]))

    def test_out_of_range(self, hand_table):
        with pytest.raises(IndexError):
            apply(hand_table, UnlearnRequest("points", "random", 0.5, point_indices=[7]))

    def test_wrong_dataset(self, hand_table):
        req = random_request(make_synthetic(10, 2), 0.2)
        with pytest.raises(ValueError):
            apply(hand_table, req)

    def test_graph_points_drop_incident_edges(self):
        g = make_synthetic_graph(30, 4, seed=1)
        ap = apply(g, random_request(g, 0.2, seed=0))
        kept = ap.kept_rows
        expected = g.adjacency.toarray()[np.ix_(kept, kept)]
        np.testing.assert_array_equal(ap.retained.adjacency.toarray(), expected)
        assert ap.retained.n == 24

    def test_graph_feature_mode_keeps_structure(self):
        g = make_synthetic_graph(30, 4, seed=1)
        ap = apply(g, topk_request(g, 0.2, feature_ratio=0.5))
        assert (ap.retained.adjacency != g.adjacency).nnz == 0
        assert ap.retained.n == g.n
