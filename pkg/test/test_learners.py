import logging
import unittest

import numpy as np
from scipy import linalg

from datagen import ModelSpec, generate
import learners


class TestLasso(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_alpha_max_zeroes_slopes(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(100, 5))
        y = X[:, 0] + rng.normal(size=100)
        model = learners.fit_lasso(X, y, alpha=learners.lasso_alpha_max(X, y) * (1.0 + 1e-9))
        np.testing.assert_allclose(model.coef, 0.0, atol=1e-12)
        self.assertAlmostEqual(model.intercept, y.mean(), places=10)
        self.assertEqual(model.size, 0)

    def test_orthonormal_soft_threshold(self):
        Z = linalg.hadamard(8)[:, 1:4].astype(np.float64)
        rng = np.random.default_rng(1)
        y = Z @ np.array([3.0, -2.0, 0.5]) + rng.normal(size=8)
        alpha = 0.7
        model = learners.fit_lasso(Z, y, alpha=alpha, tol=1e-12)
        least_squares = Z.T @ y / 8.0
        expected = np.sign(least_squares) * np.maximum(np.abs(least_squares) - alpha, 0.0)
        np.testing.assert_allclose(model.coef, expected, atol=1e-6)
        self.assertAlmostEqual(model.intercept, y.mean(), places=6)

    def test_constant_outcome(self):
        X = np.random.default_rng(2).normal(size=(30, 3))
        model = learners.fit_lasso(X, np.full(30, 4.0))
        np.testing.assert_allclose(model.predict(X), 4.0)

    def test_cross_validation_selects_sparse_model(self):
        fractions = []
        for seed in range(20):
            ds = generate(ModelSpec(model_id=5, n=500, p=200), np.random.default_rng(seed))
            model = learners.fit_lasso(ds.X, ds.Y1, seed=seed)
            fractions.append(np.mean(model.coef[4:] == 0.0))
        self.log.info("zero fraction of null coefficients: %s", fractions)
        self.assertGreaterEqual(np.mean(fractions), 0.9)

    def test_cross_validation_recovers_strong_signal(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(300, 10))
        y = 5.0 * X[:, 0] - 4.0 * X[:, 1] + rng.normal(size=300)
        model = learners.fit_lasso(X, y, seed=3)
        self.assertAlmostEqual(model.coef[0], 5.0, delta=0.3)
        self.assertAlmostEqual(model.coef[1], -4.0, delta=0.3)
        self.assertIsNotNone(model.alpha)


class TestTrees(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_cart_finds_step(self):
        rng = np.random.default_rng(4)
        X = np.column_stack([rng.uniform(-1.0, 1.0, 200), rng.normal(size=200)])
        y = (X[:, 0] > 0.0).astype(np.float64)
        model = learners.fit_cart(X, y, seed=0)
        tree = model.estimator.tree_
        self.assertEqual(tree.feature[0], 0)
        self.assertLess(abs(tree.threshold[0]), 0.1)
        self.assertLess(np.mean((model.predict(X) - y) ** 2), 1e-3)

    def test_forest_constant_outcome(self):
        X = np.random.default_rng(5).normal(size=(60, 4))
        model = learners.fit_random_forest(X, np.full(60, -2.0), n_trees=20, seed=1)
        np.testing.assert_allclose(model.predict(X[:10]), -2.0)
        self.assertEqual(model.estimator.max_features, 2)

    def test_gbrt_zero_rounds_is_mean(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(50, 2))
        y = rng.normal(size=50)
        model = learners.fit_gbrt(X, y, n_rounds=0)
        np.testing.assert_allclose(model.predict(X), y.mean())
        self.assertEqual(model.size, 0)

    def test_gbrt_reduces_training_error(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(-2.0, 2.0, size=(300, 2))
        y = np.sin(X[:, 0]) + X[:, 1] ** 2
        model = learners.fit_gbrt(X, y, n_rounds=50, seed=2)
        self.assertLess(np.mean((model.predict(X) - y) ** 2), 0.2 * np.var(y))

    def test_tree_family_constant_outcome_is_root_only(self):
        X = np.random.default_rng(8).normal(size=(40, 3))
        y = np.full(40, 1.5)
        cart = learners.fit_tree_family(X, y, "cart", seed=0)
        self.assertEqual(cart.size, 1)
        gbrt = learners.fit_tree_family(X, y, "gbrt", seed=0, n_rounds=10)
        self.assertEqual(gbrt.size, 0)
        forest = learners.fit_tree_family(X, y, "random_forest", seed=0, n_trees=5)
        self.assertEqual(forest.size, 5)
        for model in (cart, gbrt, forest):
            np.testing.assert_allclose(model.predict(X[:5]), 1.5)
        with self.assertRaises(ValueError):
            learners.fit_tree_family(X, y, "lasso")


class TestMLP(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        Z = rng.normal(size=(30, 3))
        t = rng.normal(size=30)
        width = 4
        for _ in range(10):
            theta = rng.normal(size=learners.parameter_count(3, width))
            _, gradient = learners.loss_and_gradient(theta, Z, t, width, 0.01)
            numeric = np.empty_like(theta)
            for j in range(theta.shape[0]):
                step = np.zeros_like(theta)
                step[j] = 1e-6
                upper, _ = learners.loss_and_gradient(theta + step, Z, t, width, 0.01)
                lower, _ = learners.loss_and_gradient(theta - step, Z, t, width, 0.01)
                numeric[j] = (upper - lower) / 2e-6
            error = np.linalg.norm(numeric - gradient) / max(np.linalg.norm(numeric), np.linalg.norm(gradient))
            self.assertLess(error, 1e-5)

    def test_constant_outcome(self):
        X = np.random.default_rng(9).normal(size=(40, 2))
        model = learners.fit_mlp(X, np.full(40, 7.5), seed=0)
        np.testing.assert_allclose(model.predict(X), 7.5, atol=1e-3)

    def test_linear_signal_close_to_least_squares(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(500, 2))
        y = 1.0 + 2.0 * X[:, 0] - X[:, 1] + rng.normal(size=500)
        x = rng.normal(size=(2000, 2))
        truth = 1.0 + 2.0 * x[:, 0] - x[:, 1]
        fresh = truth + rng.normal(size=2000)
        model = learners.fit_mlp(X, y, seed=1)
        coef = np.linalg.lstsq(np.column_stack([np.ones(500), X]), y, rcond=None)[0]
        mlp_mse = np.mean((model.predict(x) - fresh) ** 2)
        ols_mse = np.mean((np.column_stack([np.ones(2000), x]) @ coef - fresh) ** 2)
        self.log.info("mlp mse %.4f, ols mse %.4f", mlp_mse, ols_mse)
        self.assertLessEqual(mlp_mse, 1.5 * ols_mse)

    def test_same_seed_same_network(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(50, 2))
        y = rng.normal(size=50)
        first = learners.fit_mlp(X, y, epochs=20, seed=3)
        second = learners.fit_mlp(X, y, epochs=20, seed=3)
        np.testing.assert_array_equal(first.theta, second.theta)


if __name__ == "__main__":
    unittest.main()
