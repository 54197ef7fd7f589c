import logging
import unittest

import numpy as np

from datagen import STRATUM_LEVELS, ModelSpec, generate, oracle_h, outcome_mean, stratum_variable, true_ate
from randomizers import RandomizerConfig, randomize
from trial_data import validate


class TestDatagen(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_low_dimensional_shapes(self):
        for model_id, p, K in ((1, 4, 4), (2, 2, 4), (3, 4, 2), (4, 2, 2)):
            ds = generate(ModelSpec(model_id=model_id, n=300), np.random.default_rng(model_id))
            self.assertEqual(ds.X.shape, (300, p))
            self.assertEqual(ds.K, K)
            self.assertIsNone(ds.A)
            self.assertTrue(ds.has_potential_outcomes)
            self.assertEqual(ds.metadata["model_id"], model_id)

    def test_high_dimensional_shapes(self):
        ds = generate(ModelSpec(model_id=5, n=100, p=50), np.random.default_rng(0))
        self.assertEqual(ds.X.shape, (100, 50))
        self.assertEqual(ModelSpec(model_id=7).p, 200)

    def test_interaction_columns(self):
        ds = generate(ModelSpec(model_id=6, n=100, p=50), np.random.default_rng(0))
        columns = ds.metadata["interaction_columns"]
        self.assertEqual(len(columns), 16)
        self.assertTrue(all(2 <= c < 50 for c in columns))
        self.assertTrue(set(ds.metadata["interaction_parents"]) <= {0, 1})

    def test_fixed_dimension(self):
        with self.assertRaises(ValueError):
            ModelSpec(model_id=2, p=5)
        with self.assertRaises(ValueError):
            ModelSpec(model_id=9)
        with self.assertRaises(ValueError):
            ModelSpec(model_id=8, p=1)

    def test_covariate_supports(self):
        ds = generate(ModelSpec(model_id=1, n=2000), np.random.default_rng(4))
        self.assertTrue(np.all((ds.X[:, 0] > 0) & (ds.X[:, 0] < 1)))
        self.assertTrue(np.all(np.abs(ds.X[:, 1]) <= 2))
        self.assertEqual(set(np.unique(ds.X[:, 2])), {-1.0, 1.0})
        self.assertEqual(set(np.unique(ds.X[:, 3])), {3.0, 5.0})

    def test_closed_form_model1(self):
        truth = true_ate(ModelSpec(model_id=1))
        self.assertAlmostEqual(truth.tau, -138.285714, places=5)
        self.assertEqual(truth.se, 0.0)

    def test_closed_form_only_for_linear_models(self):
        with self.assertRaises(ValueError):
            true_ate(ModelSpec(model_id=2))

    def test_monte_carlo_agrees_with_closed_form(self):
        truth = true_ate(ModelSpec(model_id=1), method="monte_carlo", draws=200_000,
                         rng=np.random.default_rng(17))
        self.log.info("Monte Carlo effect %.4f (se %.4f)", truth.tau, truth.se)
        self.assertAlmostEqual(truth.tau, -138.285714, delta=0.5)
        self.assertLess(truth.se, 0.2)

    def test_noise_levels(self):
        spec = ModelSpec(model_id=1, n=20000)
        ds = generate(spec, np.random.default_rng(8))
        S = stratum_variable(spec, ds.B)
        self.assertAlmostEqual(np.std(ds.Y0 - outcome_mean(1, 0, ds.X, S)), 1.0, delta=0.05)
        self.assertAlmostEqual(np.std(ds.Y1 - outcome_mean(1, 1, ds.X, S)), 3.0, delta=0.1)

    def test_model4_stratum_variable(self):
        spec = ModelSpec(model_id=4)
        np.testing.assert_array_equal(stratum_variable(spec, np.array([1, 2, 1])), [1, -1, 1])

    def test_model4_negative_stratum_branch(self):
        rng = np.random.default_rng(21)
        X = np.column_stack([rng.beta(3.0, 4.0, 200), rng.uniform(-2.0, 2.0, 200)])
        x1, x2 = X[:, 0], X[:, 1]
        np.testing.assert_allclose(outcome_mean(4, 1, X, -1), 5.0 - 20.0 * x1 - 30.0 * x2 + 65.0 * np.exp(x2))
        np.testing.assert_allclose(outcome_mean(4, 0, X, -1), 5.0 - 20.0 * x1 - 30.0 * x2)
        np.testing.assert_allclose(outcome_mean(4, 1, X, 1), 5.0 + 20.0 * x1 + 30.0 * x2)
        np.testing.assert_allclose(outcome_mean(4, 0, X, 1), 5.0 + 20.0 * x1 + 30.0 * x2 + 50.0 * np.log(x1 + 1))
        spec = ModelSpec(model_id=4)
        np.testing.assert_allclose(oracle_h(spec, 1, X, 2), outcome_mean(4, 1, X, -1))
        np.testing.assert_allclose(oracle_h(spec, 0, X, np.full(200, 2)), outcome_mean(4, 0, X, -1))

    def test_stratum_frequencies(self):
        n = 20000
        for model_id in (1, 3, 4):
            ds = generate(ModelSpec(model_id=model_id, n=n), np.random.default_rng(30 + model_id))
            counts = np.bincount(ds.B - 1, minlength=ds.K)
            for k, p in enumerate(STRATUM_LEVELS[model_id][1]):
                band = 4.0 * np.sqrt(n * p * (1.0 - p))
                self.assertLessEqual(abs(counts[k] - n * p), band, (model_id, k + 1, counts[k]))

    def test_generated_trials_are_valid(self):
        for model_id in range(1, 9):
            spec = ModelSpec(model_id=model_id, n=100, p=None if model_id <= 4 else 20)
            for seed in range(100):
                rng = np.random.default_rng(seed)
                ds = generate(spec, rng)
                self.assertEqual(validate(ds), [], (model_id, seed))
                ds = ds.with_assignment(randomize(RandomizerConfig(kind="stratified_block"), ds.B, rng))
                self.assertEqual(validate(ds), [], (model_id, seed))

    def test_toeplitz_noise(self):
        ds = generate(ModelSpec(model_id=7, n=20000, p=10), np.random.default_rng(6))
        extra = ds.X[:, 4:]
        correlation = np.corrcoef(extra, rowvar=False)
        self.assertAlmostEqual(correlation[0, 1], 0.5, delta=0.05)
        self.assertAlmostEqual(correlation[0, 2], 0.25, delta=0.05)

    def test_equicorrelated_noise(self):
        ds = generate(ModelSpec(model_id=5, n=20000, p=10), np.random.default_rng(6))
        correlation = np.corrcoef(ds.X[:, 4:], rowvar=False)
        self.assertAlmostEqual(correlation[0, 5], 0.2, delta=0.05)

    def test_oracle_matches_outcome_mean(self):
        spec = ModelSpec(model_id=1, n=50)
        ds = generate(spec, np.random.default_rng(2))
        expected = 4.0 + ds.X @ np.array([100.0, 80.0, 60.0, 40.0])
        np.testing.assert_allclose(oracle_h(spec, 1, ds.X, ds.B), expected)

    def test_oracle_dimension(self):
        with self.assertRaises(ValueError):
            oracle_h(ModelSpec(model_id=1), 0, np.zeros((3, 2)), 1)

    def test_same_seed_same_population(self):
        spec = ModelSpec(model_id=8, n=40, p=30)
        first = generate(spec, np.random.default_rng(12))
        second = generate(spec, np.random.default_rng(12))
        np.testing.assert_array_equal(first.X, second.X)
        np.testing.assert_array_equal(first.Y1, second.Y1)
        np.testing.assert_array_equal(first.B, second.B)


if __name__ == "__main__":
    unittest.main()
