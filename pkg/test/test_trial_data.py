import logging
import os
import pathlib
import tempfile
import unittest

import numpy as np
import pandas as pd
from openpyxl import Workbook

from datagen import ModelSpec, generate, stratum_variable
from randomizers import RandomizerConfig, randomize
import trial_data
from trial_data import ColumnRoles, TrialDataset, TrialValidationError


class TestTrialData(unittest.TestCase):
    log = logging.getLogger(__name__)

    def _get_example_file_path(self, file_name):
        example_file_path = pathlib.Path.joinpath(pathlib.Path(
            __file__).parent.resolve(), "..", "data", file_name)
        return pathlib.Path(example_file_path).absolute().resolve()

    def _frame(self):
        return pd.DataFrame({
            "X1": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            "B": ["b", "a", "b", "a", "b", "a"],
            "A": [1, 0, 0, 1, 1, 0],
            "Y": [1.5, 2.0, 0.5, 3.0, 2.5, 1.0],
        })

    def test_from_frame(self):
        ds = trial_data.from_frame(self._frame(), ColumnRoles())
        self.assertEqual(ds.n, 6)
        self.assertEqual(ds.K, 2)
        self.assertEqual(ds.stratum_labels, ("a", "b"))
        self.assertEqual(ds.covariate_names, ("X1",))
        np.testing.assert_array_equal(ds.B, [2, 1, 2, 1, 2, 1])
        self.assertAlmostEqual(ds.pi_target, 0.5)
        self.assertFalse(ds.X.flags.writeable)

    def test_missing_column(self):
        frame = self._frame().drop(columns=["Y"])
        with self.assertRaises(TrialValidationError) as context:
            trial_data.from_frame(frame, ColumnRoles())
        self.assertIn("missing column 'Y'", context.exception.violations)

    def test_non_binary_assignment(self):
        frame = self._frame()
        frame.loc[2, "A"] = 2
        with self.assertRaises(TrialValidationError) as context:
            trial_data.from_frame(frame, ColumnRoles())
        self.assertEqual(context.exception.violations, ["non-binary assignment at row 2: '2'"])

    def test_non_numeric_covariate(self):
        frame = self._frame()
        frame["X1"] = frame["X1"].astype(object)
        frame.loc[4, "X1"] = "n/a"
        with self.assertRaises(TrialValidationError) as context:
            trial_data.from_frame(frame, ColumnRoles())
        self.assertIn("column 'X1' at row 4", context.exception.violations[0])

    def test_declared_stratum_without_units(self):
        with self.assertRaises(TrialValidationError) as context:
            trial_data.from_frame(self._frame(), ColumnRoles(), stratum_levels=["a", "b", "c"])
        self.assertIn("empty stratum 3", context.exception.violations)

    def test_unknown_stratum_label(self):
        with self.assertRaises(TrialValidationError):
            trial_data.from_frame(self._frame(), ColumnRoles(), stratum_levels=["a"])

    def test_validate_observed_outcome(self):
        ds = TrialDataset(X=np.zeros((3, 1)), B=[1, 1, 1], pi_target=0.5, A=[1, 0, 1], Y=[1.0, 0.0, 5.0],
                          Y0=[0.0, 0.0, 0.0], Y1=[1.0, 1.0, 1.0])
        self.assertEqual(trial_data.validate(ds), ["observed outcome differs from A*Y1+(1-A)*Y0 at index 2"])
        with self.assertRaises(TrialValidationError):
            ds.require_valid()

    def test_validate_target_and_labels(self):
        ds = TrialDataset(X=np.zeros((2, 1)), B=[1, 3], pi_target=1.0, K=3)
        violations = trial_data.validate(ds)
        self.assertIn("target proportion 1.0 outside (0, 1)", violations)
        self.assertIn("empty stratum 2", violations)

    def test_caller_arrays_stay_writeable(self):
        X = np.ones((4, 2))
        ds = TrialDataset(X=X, B=[1, 1, 2, 2], pi_target=0.5)
        X[0, 0] = 7.0
        self.assertEqual(ds.X[0, 0], 1.0)
        self.assertTrue(X.flags.writeable)

    def test_stratum_stats(self):
        ds = trial_data.from_frame(self._frame(), ColumnRoles())
        counts = trial_data.stratum_stats(ds)
        np.testing.assert_array_equal(counts.n_k, [3, 3])
        np.testing.assert_array_equal(counts.n_k1, [1, 2])
        np.testing.assert_array_equal(counts.n_k0, [2, 1])
        np.testing.assert_allclose(counts.p_nk, [0.5, 0.5])
        np.testing.assert_allclose(counts.pi_nk, [1 / 3, 2 / 3])

    def test_subset_keeps_strata(self):
        ds = trial_data.from_frame(self._frame(), ColumnRoles())
        part = ds.subset(np.array([0, 2, 4]))
        self.assertEqual(part.K, 2)
        self.assertEqual(part.stratum_labels, ("a", "b"))
        np.testing.assert_array_equal(part.Y, [1.5, 0.5, 2.5])

    def test_csv_round_trip(self):
        for model_id, pi_target in ((1, 0.5), (3, 2.0 / 3.0), (4, 0.5)):
            rng = np.random.default_rng(11 + model_id)
            ds = generate(ModelSpec(model_id=model_id, n=60), rng, pi_target=pi_target)
            randomizer = RandomizerConfig(kind="stratified_block", pi_target=pi_target)
            ds = ds.with_assignment(randomize(randomizer, ds.B, rng))
            with tempfile.TemporaryDirectory() as temporary_directory_name:
                file_path = os.path.join(temporary_directory_name, f"model{model_id}.csv")
                trial_data.write_csv(ds, file_path)
                loaded = trial_data.load_csv(file_path)
            for name in ("X", "B", "A", "Y", "Y0", "Y1"):
                np.testing.assert_array_equal(getattr(loaded, name), getattr(ds, name))
            self.assertEqual(loaded.covariate_names, ds.covariate_names)
            self.assertEqual(loaded.stratum_labels, ds.stratum_labels)
            self.assertEqual(loaded.pi_target, pi_target)
            self.assertEqual(loaded.p, ds.p)

    def test_model4_strata_keep_their_meaning(self):
        spec = ModelSpec(model_id=4, n=400)
        rng = np.random.default_rng(21)
        ds = generate(spec, rng)
        ds = ds.with_assignment(randomize(RandomizerConfig(kind="stratified_block"), ds.B, rng))
        with tempfile.TemporaryDirectory() as temporary_directory_name:
            file_path = os.path.join(temporary_directory_name, "model4.csv")
            trial_data.write_csv(ds, file_path)
            loaded = trial_data.load_csv(file_path)
        self.assertEqual(loaded.stratum_labels, (1, -1))
        np.testing.assert_array_equal(stratum_variable(spec, loaded.B), stratum_variable(spec, ds.B))

    def test_explicit_potential_outcome_columns(self):
        rng = np.random.default_rng(12)
        ds = generate(ModelSpec(model_id=3, n=60), rng)
        ds = ds.with_assignment(randomize(RandomizerConfig(kind="stratified_block"), ds.B, rng))
        roles = ColumnRoles(potential_outcomes=("untreated", "treated"))
        with tempfile.TemporaryDirectory() as temporary_directory_name:
            file_path = os.path.join(temporary_directory_name, "model3.csv")
            trial_data.write_csv(ds, file_path, roles)
            self.assertEqual(pd.read_csv(file_path, skiprows=1).shape[1], ds.p + 5)
            loaded = trial_data.load_csv(file_path, roles)
        np.testing.assert_array_equal(loaded.Y1, ds.Y1)
        self.assertEqual(loaded.p, ds.p)

    def test_mixed_label_types(self):
        frame = self._frame()
        frame["B"] = ["b", 1, "b", 1, "b", 1]
        ds = trial_data.from_frame(frame, ColumnRoles())
        self.assertEqual(ds.stratum_labels, (1, "b"))
        np.testing.assert_array_equal(ds.B, [2, 1, 2, 1, 2, 1])

    def test_load_excel(self):
        with tempfile.TemporaryDirectory() as temporary_directory_name:
            file_path = os.path.join(temporary_directory_name, "trial.xlsx")
            wb = Workbook()
            ws = wb.active
            ws.title = "trial"
            ws.append(["age", "site", "A", "Y"])
            ws.append([51.0, "north", 1, 12.5])
            ws.append([47.0, "north", 0, 10.0])
            ws.append([63.0, "south", 1, 15.0])
            ws.append([58.0, "south", 0, 11.5])
            wb.save(file_path)

            ds = trial_data.load_table(file_path, ColumnRoles(stratum="site"))
        self.assertEqual(ds.stratum_labels, ("north", "south"))
        self.assertEqual(ds.covariate_names, ("age",))
        np.testing.assert_array_equal(ds.X[:, 0], [51.0, 47.0, 63.0, 58.0])
        np.testing.assert_array_equal(ds.A, [1, 0, 1, 0])

    def test_missing_file(self):
        with self.assertRaises(TrialValidationError):
            trial_data.load_csv("does_not_exist.csv")

    def test_example_file(self):
        ds = trial_data.load_csv(self._get_example_file_path("example_trial.csv"))
        self.log.info("example trial: n=%d K=%d p=%d", ds.n, ds.K, ds.p)
        self.assertEqual(ds.n, 40)
        self.assertEqual(ds.stratum_labels, ("high", "low"))
        self.assertEqual(ds.covariate_names, ("X1", "X2"))
        self.assertEqual(trial_data.validate(ds), [])


if __name__ == "__main__":
    unittest.main()
