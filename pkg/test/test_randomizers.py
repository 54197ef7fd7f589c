import logging
import unittest

import numpy as np

from randomizers import (RandomizerConfig, efron_biased_coin, pocock_simon_minimization, randomize,
                         simple_randomize, stratified_block)


class _ScriptedDraws:
    """
    Uniform draws that replay a fixed prefix before continuing with a seeded generator.
    """

    def __init__(self, prefix, seed):
        self._prefix = list(prefix)
        self._rng = np.random.default_rng(seed)

    def random(self):
        return self._prefix.pop(0) if self._prefix else self._rng.random()


class TestRandomizers(unittest.TestCase):
    log = logging.getLogger(__name__)

    def _interleaved_strata(self):
        rng = np.random.default_rng(3)
        return rng.choice([1, 2, 3], size=180, p=[0.5, 0.3, 0.2])

    def test_block_counts_two_thirds(self):
        B = self._interleaved_strata()
        cfg = RandomizerConfig(kind="stratified_block", pi_target=2.0 / 3.0, block_size=6)
        A = stratified_block(B, cfg, np.random.default_rng(1))
        for k in (1, 2, 3):
            arrivals = A[B == k]
            complete = arrivals.shape[0] // 6
            for block in range(complete):
                self.assertEqual(arrivals[block * 6:(block + 1) * 6].sum(), 4)

    def test_block_incomplete_final_block(self):
        B = np.ones(8, dtype=np.int64)
        cfg = RandomizerConfig(kind="stratified_block", pi_target=0.5, block_size=6)
        for seed in range(20):
            A = stratified_block(B, cfg, np.random.default_rng(seed))
            self.assertEqual(A[:6].sum(), 3)
            self.assertEqual(A[6:].sum(), 1)

    def test_block_positions_vary(self):
        B = np.ones(6, dtype=np.int64)
        cfg = RandomizerConfig(kind="stratified_block", block_size=6)
        patterns = {tuple(stratified_block(B, cfg, np.random.default_rng(seed))) for seed in range(50)}
        self.assertGreater(len(patterns), 5)

    def test_block_size_must_fit_target(self):
        with self.assertRaises(ValueError):
            RandomizerConfig(kind="stratified_block", pi_target=0.5, block_size=5)

    def test_simple_proportion(self):
        A = simple_randomize(20000, 0.3, np.random.default_rng(7))
        self.assertAlmostEqual(A.mean(), 0.3, delta=0.02)
        self.assertTrue(set(np.unique(A)) <= {0, 1})

    def test_efron_deterministic_coin_keeps_balance(self):
        B = self._interleaved_strata()
        A = efron_biased_coin(B, RandomizerConfig(kind="efron_biased_coin", coin_prob=1.0),
                              np.random.default_rng(5))
        for k in (1, 2, 3):
            imbalance = np.cumsum(np.where(A[B == k] == 1, 1, -1))
            self.assertLessEqual(np.abs(imbalance).max(), 1)

    def test_efron_needs_equal_allocation(self):
        with self.assertRaises(ValueError):
            RandomizerConfig(kind="efron_biased_coin", pi_target=2.0 / 3.0)

    def test_minimization_deterministic_coin_keeps_balance(self):
        B = self._interleaved_strata()
        A = pocock_simon_minimization(B, RandomizerConfig(kind="minimization", coin_prob=1.0),
                                      np.random.default_rng(9))
        for k in (1, 2, 3):
            arrivals = A[B == k]
            self.assertLessEqual(abs(2 * arrivals.sum() - arrivals.shape[0]), 1)

    def test_minimization_two_factors(self):
        rng = np.random.default_rng(13)
        Z = np.column_stack([rng.integers(0, 2, 400), rng.integers(0, 3, 400)])
        cfg = RandomizerConfig(kind="minimization", weights=(1.0, 1.0))
        A = pocock_simon_minimization(Z, cfg, np.random.default_rng(2))
        for j in range(2):
            for level in np.unique(Z[:, j]):
                arrivals = A[Z[:, j] == level]
                self.assertLess(abs(arrivals.mean() - 0.5), 0.1)

    def test_minimization_weight_count(self):
        with self.assertRaises(ValueError):
            pocock_simon_minimization(np.ones((5, 2)), RandomizerConfig(kind="minimization", weights=(1.0,)),
                                      np.random.default_rng(0))

    def test_minimization_prefers_lesser_arm(self):
        # draws below 0.25 treat the first three units, 0.99 sends the fourth to control: T=3, C=1
        cfg = RandomizerConfig(kind="minimization", coin_prob=0.75)
        Z = np.ones(5, dtype=np.int64)
        history = [0.0, 0.0, 0.0, 0.99]
        A = pocock_simon_minimization(Z, cfg, _ScriptedDraws(history + [0.2499], 0))
        np.testing.assert_array_equal(A, [1, 1, 1, 0, 1])
        A = pocock_simon_minimization(Z, cfg, _ScriptedDraws(history + [0.2501], 0))
        self.assertEqual(A[4], 0)
        controls = [pocock_simon_minimization(Z, cfg, _ScriptedDraws(history, seed))[4] == 0
                    for seed in range(4000)]
        self.assertAlmostEqual(np.mean(controls), 0.75, delta=0.03)

    def test_efron_two_thirds_coin(self):
        cfg = RandomizerConfig(kind="efron_biased_coin", coin_prob=2.0 / 3.0)
        B = np.ones(2, dtype=np.int64)
        A = efron_biased_coin(B, cfg, _ScriptedDraws([0.4, 0.33], 0))
        np.testing.assert_array_equal(A, [1, 1])
        A = efron_biased_coin(B, cfg, _ScriptedDraws([0.4, 0.34], 0))
        np.testing.assert_array_equal(A, [1, 0])
        controls = [efron_biased_coin(B, cfg, _ScriptedDraws([0.0], seed))[1] == 0 for seed in range(4000)]
        self.assertAlmostEqual(np.mean(controls), 2.0 / 3.0, delta=0.03)

    def test_stratum_proportions_converge(self):
        B = np.random.default_rng(17).integers(1, 3, size=10000)
        for kind in ("simple", "stratified_block", "efron_biased_coin", "minimization"):
            cfg = RandomizerConfig(kind=kind)
            worst = 0.0
            for seed in range(50):
                A = randomize(cfg, B, np.random.default_rng(seed))
                worst = max(worst, max(abs(A[B == k].mean() - 0.5) for k in (1, 2)))
            self.log.info("%s: largest stratum deviation %.4f", kind, worst)
            self.assertLess(worst, 0.03, kind)

    def test_same_seed_same_assignment(self):
        B = self._interleaved_strata()
        for kind in ("simple", "stratified_block", "efron_biased_coin", "minimization"):
            cfg = RandomizerConfig(kind=kind)
            first = randomize(cfg, B, np.random.default_rng(42))
            second = randomize(cfg, B, np.random.default_rng(42))
            np.testing.assert_array_equal(first, second)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            RandomizerConfig(kind="urn")
        with self.assertRaises(ValueError):
            RandomizerConfig(pi_target=1.0)
        with self.assertRaises(ValueError):
            RandomizerConfig(coin_prob=0.5)


if __name__ == "__main__":
    unittest.main()
