import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dui import models
from dui.datasets import DatasetTable, make_synthetic, make_synthetic_graph, split_indices, SplitSpec
from dui.independence import IndependenceConfig
from dui.models import ModelSpec, TrainOptions
from dui.requests import UnlearnRequest, apply, random_request, topk_request
from dui.unlearn import (SolverError, UnlearnConfig, i_up_params, influence_gradient, inverse_hvp_direct,
                         inverse_hvp_lissa, lf_row_gradients, lissa, solve_direct, unlearn)

CONVERGED = TrainOptions(learning_rate=1.0, epochs=20_000, tolerance=1e-10)


@pytest.fixture(scope="module")
def convex():
    data = make_synthetic(200, 5, 2, seed=3, separation=1.5)
    spec = ModelSpec("logreg", 5, 2, l2_reg=0.1)
    theta, _ = models.train(spec, data, None, CONVERGED)
    return spec, data, theta


def _direct(method, **kw):
    return UnlearnConfig(method=method, solver="direct", damping=0.0, train=CONVERGED, **kw)


class TestInfluenceGradient:
    def test_empty_request(self, convex, caplog):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.0))
        assert not influence_gradient(spec, theta, ap).any()
        assert "empty unlearning request" in caplog.text

    def test_points_is_retained_gradient_identity(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.1, seed=1))
        g = influence_gradient(spec, theta, ap)
        n, nk = data.n, ap.retained.n
        expected = models.grad(spec, theta, ap.retained) - (n / nk) * models.grad(spec, theta, data)
        np.testing.assert_allclose(g, expected, atol=1e-14)

    def test_graph_points_is_retained_gradient_identity(self):
        g = make_synthetic_graph(40, 5, seed=4)
        rows = split_indices(40, SplitSpec(0.8, 0)).train_indices
        spec = ModelSpec("gcn", 5, 3, hidden_dim=6, l2_reg=0.05)
        theta = np.random.default_rng(2).normal(scale=0.5, size=spec.param_count)
        ap = apply(g, random_request(g, 0.1, seed=3, candidates=rows))
        grad = influence_gradient(spec, theta, ap, loss_indices=rows)
        nk = rows.size - ap.delta_rows.size
        expected = (models.grad(spec, theta, ap.retained, ap.remap(rows))
                    - (rows.size / nk) * models.grad(spec, theta, g, rows))
        np.testing.assert_allclose(grad, expected, atol=1e-13)

    def test_twin_antiparallel(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 3))
        X[29] = X[28]
        y = (X[:, 0] > 0).astype(int)
        y[29] = y[28]
        data = DatasetTable(X, y, 2)
        spec = ModelSpec("logreg", 3, 2, l2_reg=0.1)
        theta, _ = models.train(spec, data, None, CONVERGED)
        ap = apply(data, UnlearnRequest("points", "random", 0.05, point_indices=[29]))
        g = influence_gradient(spec, theta, ap)
        twin = models.row_gradient(spec, theta, data, [28], ce_weight=1.0, ridge_weight=1.0)
        cos = g @ twin / (np.linalg.norm(g) * np.linalg.norm(twin))
        assert cos == pytest.approx(-1.0, abs=1e-12)
        retrained, _ = models.train(spec, ap.retained, None, CONVERGED)
        star = unlearn(spec, theta, data, ap, _direct("influence")).theta
        assert np.linalg.norm(star - retrained) <= 1e-2

    def test_noop_feature_replacement(self, convex):
        spec, data, theta = convex
        X = np.array(data.features)
        X[4, 2] = 0.0
        d0 = data.with_features(X)
        ap = apply(d0, UnlearnRequest("feature_values", "top_k", 0.01, cells=[[4, 2]]))
        assert not influence_gradient(spec, theta, ap).any()

    @pytest.mark.parametrize("graph", [False, True])
    def test_feature_mode_is_gradient_difference(self, graph):
        if graph:
            data = make_synthetic_graph(40, 5, seed=2)
            spec = ModelSpec("gcn", 5, 3, hidden_dim=6)
            loss_rows = split_indices(40, SplitSpec(0.8, 0)).train_indices
        else:
            data = make_synthetic(60, 5, 3, seed=2, nonnegative=True)
            spec = ModelSpec("mlp", 5, 3, hidden_dim=6)
            loss_rows = None
        theta = np.random.default_rng(1).normal(scale=0.5, size=spec.param_count)
        ap = apply(data, topk_request(data, 0.2, feature_ratio=0.4, candidates=loss_rows))
        g = influence_gradient(spec, theta, ap, loss_indices=loss_rows)
        expected = models.grad(spec, theta, ap.retained, loss_rows) - models.grad(spec, theta, data, loss_rows)
        np.testing.assert_allclose(g, expected, atol=1e-14)

    def test_alpha_zero_matches_influence(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.1, seed=2))
        a = influence_gradient(spec, theta, ap, lam=3.0, independence=IndependenceConfig(alpha=0.0))
        np.testing.assert_array_equal(a, influence_gradient(spec, theta, ap))

    def test_lambda_adds_lf_rows(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.1, seed=2))
        a = influence_gradient(spec, theta, ap, lam=3.0, independence=IndependenceConfig())
        assert not np.allclose(a, influence_gradient(spec, theta, ap))


class TestDirect:
    def test_ridge_regime_closed_form(self):
        t = DatasetTable(np.zeros((6, 3)), np.array([0, 1, 0, 1, 0, 1]), 2)
        spec = ModelSpec("logreg", 3, 2, l2_reg=0.2)
        theta = np.random.default_rng(0).normal(size=spec.param_count)
        v = np.where(spec.weight_mask(), 1.0, 0.0) * np.arange(1.0, spec.param_count + 1)
        x = inverse_hvp_direct(spec, theta, t, v, damping=0.01).x
        np.testing.assert_allclose(x, v / 0.21, atol=1e-12)

    def test_zero_rhs(self, convex):
        spec, data, theta = convex
        assert not inverse_hvp_direct(spec, theta, data, np.zeros(spec.param_count)).x.any()

    def test_residual(self, convex):
        spec, data, theta = convex
        v = np.random.default_rng(1).normal(size=spec.param_count)
        sol = inverse_hvp_direct(spec, theta, data, v, damping=0.01)
        assert sol.residual <= 1e-6
        H = np.stack([models.hvp(spec, theta, data, None, e) for e in np.eye(spec.param_count)])
        np.testing.assert_allclose((H + 0.01 * np.eye(spec.param_count)) @ sol.x, v, atol=1e-10)
        assert sol.condition >= 1.0

    def test_indefinite_needs_damping(self):
        with pytest.raises(SolverError, match="increase damping"):
            solve_direct(lambda v: -v, np.ones(3), damping=0.5)

    def test_size_limit(self):
        with pytest.raises(SolverError, match="lissa"):
            solve_direct(lambda v: v, np.ones(5), max_dim=4)


class TestLissa:
    def test_one_term(self):
        v = np.array([1.0, -2.0])
        np.testing.assert_array_equal(lissa(lambda x: 3 * x, v, iterations=1, scale=0.1).x, 0.1 * v)

    @pytest.mark.parametrize("J", [1, 2, 50])
    def test_fixed_point_hook(self, J):
        beta = 0.25
        v = np.array([0.5, 1.5, -1.0])
        sol = lissa(lambda x: x / beta, v, iterations=J, scale=beta, damping=0.0)
        np.testing.assert_allclose(sol.x, beta * v, atol=1e-15)
        assert sol.residual <= 1e-15

    def test_matches_direct(self, convex):
        spec, data, theta = convex
        v = np.random.default_rng(2).normal(size=spec.param_count)
        d = inverse_hvp_direct(spec, theta, data, v, damping=0.01).x
        li = inverse_hvp_lissa(spec, theta, data, v, iterations=2000, scale=0.1, damping=0.01).x
        assert np.linalg.norm(li - d) / np.linalg.norm(d) <= 1e-3

    def test_matches_direct_with_lf(self, convex):
        spec, data, theta = convex
        v = np.random.default_rng(3).normal(size=spec.param_count)
        cfg = IndependenceConfig(alpha=0.5)
        d = inverse_hvp_direct(spec, theta, data, v, lam=2.0, independence=cfg, damping=0.01).x
        li = inverse_hvp_lissa(spec, theta, data, v, lam=2.0, independence=cfg, iterations=2000).x
        assert np.linalg.norm(li - d) / np.linalg.norm(d) <= 1e-3

    def test_divergence_detector(self):
        with pytest.raises(SolverError, match="scale"):
            lissa(lambda x: 100 * x, np.ones(4), iterations=50, scale=0.1)

    def test_probe_warns(self):
        with pytest.warns(RuntimeWarning, match="spectral radius"):
            lissa(lambda x: 20 * x, np.ones(4), iterations=2, scale=0.1, probe=10)

    def test_repeats_average(self):
        H = np.diag([1.0, 2.0, 3.0])
        v = np.ones(3)
        a = lissa(lambda x: H @ x, v, iterations=40, repeats=1)
        b = lissa(lambda x: H @ x, v, iterations=40, repeats=3)
        np.testing.assert_allclose(a.x, b.x, rtol=1e-14)


class TestUnlearn:
    @pytest.mark.parametrize("method", ["influence", "dui"])
    def test_empty_request_keeps_theta(self, convex, method):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.0))
        res = unlearn(spec, theta, data, ap, UnlearnConfig(method=method))
        np.testing.assert_array_equal(res.theta, theta)
        assert res.runtime_seconds > 0 and res.diagnostics["lissa_residual"] == 0.0

    def test_empty_request_retrain(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.0))
        res = unlearn(spec, theta, data, ap, _direct("retrain"))
        assert np.linalg.norm(res.theta - theta) <= 1e-8

    @pytest.mark.parametrize("strategy", ["random", "top_k"])
    def test_closes_half_the_gap(self, convex, strategy):
        spec, data, theta = convex
        req = (random_request(data, 0.05, seed=4) if strategy == "random"
               else topk_request(data, 0.05, feature_ratio=0.2, mode="points"))
        ap = apply(data, req)
        retrained, _ = models.train(spec, ap.retained, None, CONVERGED)
        star = unlearn(spec, theta, data, ap, UnlearnConfig(method="influence", solver="lissa")).theta
        assert np.linalg.norm(star - retrained) <= 0.5 * np.linalg.norm(theta - retrained)

    @given(st.integers(0, 500))
    def test_retained_loss_does_not_increase(self, seed):
        data = make_synthetic(120, 4, 2, seed=seed % 5)
        spec = ModelSpec("logreg", 4, 2, l2_reg=0.1)
        theta, _ = models.train(spec, data, None, TrainOptions(1.0, 3000, 1e-9))
        ap = apply(data, random_request(data, 0.05, seed=seed))
        res = unlearn(spec, theta, data, ap, UnlearnConfig(method="influence", solver="direct"))
        assert res.diagnostics["retained_loss_after"] <= res.diagnostics["retained_loss_before"] + 1e-6

    def test_lambda_zero_dui_equals_influence(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.05, seed=5))
        a = unlearn(spec, theta, data, ap, UnlearnConfig(method="dui", lam=0.0, solver="direct")).theta
        b = unlearn(spec, theta, data, ap, UnlearnConfig(method="influence", solver="direct")).theta
        assert np.linalg.norm(a - b) <= 1e-6

    def test_diagnostics(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.05, seed=6))
        lis = unlearn(spec, theta, data, ap, UnlearnConfig(method="dui"))
        assert {"influence_grad_norm", "lissa_residual", "loss_breakdown_before",
                "loss_breakdown_after"} <= lis.diagnostics.keys()
        direct = unlearn(spec, theta, data, ap, UnlearnConfig(method="dui", solver="direct"))
        assert "lissa_residual" not in direct.diagnostics and "condition_estimate" in direct.diagnostics
        b = direct.diagnostics["loss_breakdown_after"]
        assert b["total"] == pytest.approx(b["origin"] + b["lf"], abs=1e-12)

    def test_deterministic(self, convex):
        spec, data, theta = convex
        ap = apply(data, random_request(data, 0.05, seed=7))
        a = unlearn(spec, theta, data, ap, UnlearnConfig(method="dui"))
        b = unlearn(spec, theta, data, ap, UnlearnConfig(method="dui"))
        assert a.theta.tobytes() == b.theta.tobytes()
        assert a.diagnostics == b.diagnostics

    def test_foreign_request(self, convex):
        spec, data, theta = convex
        other = make_synthetic(200, 5, 2, seed=3, separation=1.5)
        with pytest.raises(ValueError):
            unlearn(spec, theta, other, apply(data, random_request(data, 0.05)), UnlearnConfig())

    def test_gcn_points_transductive(self):
        g = make_synthetic_graph(50, 6, seed=5)
        rows = split_indices(50, SplitSpec(0.8, 0)).train_indices
        spec = ModelSpec("gcn", 6, 3, hidden_dim=8, l2_reg=0.05)
        theta, _ = models.train(spec, g, rows, TrainOptions(0.5, 5000, 1e-9))
        ap = apply(g, random_request(g, 0.1, seed=1, candidates=rows))
        res = unlearn(spec, theta, g, ap, UnlearnConfig(method="dui", lissa_iterations=50), loss_indices=rows)
        # non-convex objective: only a bounded, finite step is guaranteed
        assert np.all(np.isfinite(res.theta))
        assert 0 < np.linalg.norm(res.theta - theta) < np.linalg.norm(theta)
        assert abs(res.diagnostics["retained_loss_after"] - res.diagnostics["retained_loss_before"]) < 0.05

    def test_config_validation(self):
        with pytest.raises(ValueError):
            UnlearnConfig(method="gif")
        with pytest.raises(ValueError):
            UnlearnConfig(lissa_scale=0.0)


class TestIup:
    def test_alpha_zero(self, convex):
        spec, data, theta = convex
        assert not i_up_params(spec, theta, 3, data, IndependenceConfig(alpha=0.0)).any()

    def test_duplicated_rows_equal(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(20, 3))
        X[5] = X[4]
        y = rng.integers(0, 2, size=20)
        y[5] = y[4]
        data = DatasetTable(X, y, 2)
        spec = ModelSpec("logreg", 3, 2, l2_reg=0.1)
        theta, _ = models.train(spec, data, None, TrainOptions(1.0, 2000))
        cfg = IndependenceConfig()
        np.testing.assert_allclose(i_up_params(spec, theta, 4, data, cfg), i_up_params(spec, theta, 5, data, cfg),
                                   atol=1e-12)

    def test_row_decomposition(self, convex):
        spec, data, theta = convex
        cfg = IndependenceConfig(batch_size=64, seed=1)
        lf = models.prepare_lf(spec, data, None, cfg)
        rows = lf_row_gradients(spec, theta, data, lf.rows, lf)
        batch = models.combined_grad(spec, theta, data, None, 1.0, lf)[0] - models.grad(spec, theta, data)
        np.testing.assert_allclose(rows.sum(axis=0), batch, atol=1e-8)
