"""
Average treatment effect estimators under stratified randomization, their
variance components and Wald confidence intervals.
"""

from dataclasses import asdict, dataclass, field, replace
import logging
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
from scipy import stats

from trial_data import StratumStats, TrialDataset, stratum_stats

log = logging.getLogger(__name__)

DEFAULT_LEVEL = 0.95


class EstimationError(ValueError):
    """
    Raised if an estimate cannot be formed, e.g. a stratum without treated or control units.
    """


@dataclass(frozen=True)
class EffectEstimate:
    """
    Point estimate, variance components and Wald interval of the average treatment effect.

    `se` is sqrt((var_r + var_hr) / n).
    """
    tau_hat: float
    var_r: float
    var_hr: float
    n: int
    se: float
    ci_level: float = DEFAULT_LEVEL
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    method: str = "naive"
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def covers(self, tau: float) -> bool:
        return bool(self.ci_low <= tau <= self.ci_high)

    def to_row(self) -> Dict[str, Any]:
        """
        Flat record for one CSV or JSON lines row.
        """
        row = asdict(self)
        metadata = row.pop("metadata")
        row.update({f"meta_{key}": value for key, value in metadata.items()})
        return row


def _checked_stats(ds: TrialDataset) -> StratumStats:
    if ds.A is None or ds.Y is None:
        raise EstimationError("Estimation needs assignments and observed outcomes.")
    counts = stratum_stats(ds)
    problems = []
    for k in range(counts.K):
        label = ds.stratum_labels[k]
        if counts.n_k1[k] == 0:
            problems.append(f"stratum {label} has no treated units")
        if counts.n_k0[k] == 0:
            problems.append(f"stratum {label} has no control units")
    if problems:
        raise EstimationError("; ".join(problems))
    return counts


def _stratum_sum(ds: TrialDataset, values: np.ndarray) -> np.ndarray:
    return np.bincount(ds.B - 1, weights=values, minlength=ds.K)[:ds.K]


def transformed_outcomes(ds: TrialDataset, h1: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """
    r_i = Y_i - [(1 - pi) h(X_i, 1) + pi h(X_i, 0)] for the observed arm, with the target pi.
    """
    pi = ds.pi_target
    return ds.Y - ((1.0 - pi) * np.asarray(h1) + pi * np.asarray(h0))


def variance_components(ds: TrialDataset, r: np.ndarray, pi: float) -> Tuple[float, float]:
    """
    Sample analogs of the residual variance term and the stratum heterogeneity term.

    var_r  = 1/pi * sum_k p_k * mean_{k,1}[(r - mean_{k,1} r)^2]
           + 1/(1-pi) * sum_k p_k * mean_{k,0}[(r - mean_{k,0} r)^2]
    var_hr = sum_k p_k * [(mean_{k,1} r - mean_1 r) - (mean_{k,0} r - mean_0 r)]^2

    :param TrialDataset ds: Dataset with assignments.
    :param np.ndarray r: Transformed outcome of every unit for its observed arm.
    :param float pi: Target treated proportion.
    :raises EstimationError: If a stratum has an empty arm.
    :return tuple: (var_r, var_hr), both nonnegative.
    """
    counts = _checked_stats(ds)
    r = np.asarray(r, dtype=np.float64)
    A = ds.A
    mean_k1 = _stratum_sum(ds, A * r) / counts.n_k1
    mean_k0 = _stratum_sum(ds, (1 - A) * r) / counts.n_k0
    centered = r - np.where(A == 1, mean_k1[ds.B - 1], mean_k0[ds.B - 1])
    spread_k1 = _stratum_sum(ds, A * centered ** 2) / counts.n_k1
    spread_k0 = _stratum_sum(ds, (1 - A) * centered ** 2) / counts.n_k0
    var_r = float(counts.p_nk @ spread_k1 / pi + counts.p_nk @ spread_k0 / (1.0 - pi))

    mean_1 = float(np.sum(A * r) / counts.n_k1.sum())
    mean_0 = float(np.sum((1 - A) * r) / counts.n_k0.sum())
    heterogeneity = (mean_k1 - mean_1) - (mean_k0 - mean_0)
    var_hr = float(counts.p_nk @ heterogeneity ** 2)
    return max(var_r, 0.0), max(var_hr, 0.0)


def wald_ci(est: EffectEstimate, level: float = DEFAULT_LEVEL) -> EffectEstimate:
    """
    tau_hat -/+ z * se with the standard normal quantile z of (1 + level) / 2.

    :param EffectEstimate est: Estimate with finite standard error.
    :param float level: Confidence level in (0, 1).
    :raises ValueError: If the level is outside (0, 1).
    :return EffectEstimate: Copy with the interval set.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"Confidence level {level} outside (0, 1).")
    half = float(stats.norm.ppf(0.5 + level / 2.0)) * est.se
    return replace(est, ci_level=level, ci_low=est.tau_hat - half, ci_high=est.tau_hat + half)


def estimate_with_predictions(ds: TrialDataset, h1: np.ndarray, h0: np.ndarray,
                              level: float = DEFAULT_LEVEL, method: str = "adjusted") -> EffectEstimate:
    """
    Plug predicted projection values into the adjusted estimator

        tau = sum_k p_k * [(mean_{k,1} Y - 1/n_k1 * sum_k (A - pi_k) h(X, 1))
                           - (mean_{k,0} Y + 1/n_k0 * sum_k (A - pi_k) h(X, 0))]

    with the realized treated fraction pi_k inside the correction terms.

    :param TrialDataset ds: Dataset with assignments and observed outcomes.
    :param np.ndarray h1: h(X_i, 1) for every unit.
    :param np.ndarray h0: h(X_i, 0) for every unit.
    :param float level: Confidence level.
    :param str method: Label stored in the estimate.
    :raises EstimationError: If a stratum has an empty arm.
    :return EffectEstimate: The estimate with variance and interval.
    """
    counts = _checked_stats(ds)
    A, Y = ds.A, ds.Y
    h1 = np.asarray(h1, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    imbalance = A - counts.pi_nk[ds.B - 1]
    mean_k1 = _stratum_sum(ds, A * Y) / counts.n_k1
    mean_k0 = _stratum_sum(ds, (1 - A) * Y) / counts.n_k0
    correction_1 = _stratum_sum(ds, imbalance * h1) / counts.n_k1
    correction_0 = _stratum_sum(ds, imbalance * h0) / counts.n_k0
    tau_hat = float(counts.p_nk @ ((mean_k1 - correction_1) - (mean_k0 + correction_0)))

    var_r, var_hr = variance_components(ds, transformed_outcomes(ds, h1, h0), ds.pi_target)
    se = float(np.sqrt((var_r + var_hr) / ds.n))
    est = EffectEstimate(tau_hat=tau_hat, var_r=var_r, var_hr=var_hr, n=ds.n, se=se, method=method)
    return wald_ci(est, level)


def naive_estimate(ds: TrialDataset, level: float = DEFAULT_LEVEL) -> EffectEstimate:
    """
    sum_k p_k * (mean_{k,1} Y - mean_{k,0} Y), the adjusted estimator with h = 0.
    """
    zeros = np.zeros(ds.n)
    return estimate_with_predictions(ds, zeros, zeros, level, method="naive")


def adjusted_estimate(ds: TrialDataset, fit, level: float = DEFAULT_LEVEL) -> EffectEstimate:
    """
    Adjusted estimator with the projection functions of a `ProjectionFit` evaluated on the dataset.

    :param TrialDataset ds: Dataset with assignments and observed outcomes.
    :param ProjectionFit fit: Fitted projection functions for both arms.
    :param float level: Confidence level.
    :raises EstimationError: If a stratum has an empty arm.
    :return EffectEstimate: The estimate.
    """
    h1 = fit.predict(ds.X, 1, ds.B)
    h0 = fit.predict(ds.X, 0, ds.B)
    method = ("~" if fit.spec.stratum_specific else "") + fit.spec.kind
    est = estimate_with_predictions(ds, h1, h0, level, method=method)
    if fit.fallbacks:
        est = replace(est, metadata={"fallback_cells": len(fit.fallbacks)})
    return est


Coefficients = Union[np.ndarray, Mapping[Tuple[int, int], np.ndarray]]


def general_regression_estimate(ds: TrialDataset, coef: Coefficients) -> float:
    """
    General regression adjusted estimator with stratum and arm specific slopes beta_k(a):

        sum_k p_k * [{mean_{k,1} Y - (mean_{k,1} X - mean_k X)' beta_k(1)}
                     - {mean_{k,0} Y - (mean_{k,0} X - mean_k X)' beta_k(0)}]

    :param TrialDataset ds: Dataset with assignments and observed outcomes.
    :param coef: Array of shape (2, K, p) indexed [a, k-1], or a mapping (a, k) -> slopes.
    :raises EstimationError: If a stratum has an empty arm.
    :return float: The estimate.
    """
    counts = _checked_stats(ds)
    tau = 0.0
    for k in range(1, ds.K + 1):
        rows = ds.B == k
        treated = rows & (ds.A == 1)
        control = rows & (ds.A == 0)
        beta1 = coef[(1, k)] if isinstance(coef, Mapping) else coef[1, k - 1]
        beta0 = coef[(0, k)] if isinstance(coef, Mapping) else coef[0, k - 1]
        x_bar = ds.X[rows].mean(axis=0)
        arm_1 = ds.Y[treated].mean() - (ds.X[treated].mean(axis=0) - x_bar) @ beta1
        arm_0 = ds.Y[control].mean() - (ds.X[control].mean(axis=0) - x_bar) @ beta0
        tau += counts.p_nk[k - 1] * (arm_1 - arm_0)
    return float(tau)
