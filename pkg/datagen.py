"""
Synthetic trial populations with known potential outcomes.

Models 1-4 are low dimensional, Models 5-8 reuse the outcome functions of Models 1-4
and append correlated noise covariates up to p columns:

    Y(a) = g_a(X) + sigma_a * eps_a,   eps_a ~ N(0, 1)
"""

from dataclasses import dataclass
from functools import lru_cache
import logging
from typing import Optional

import numpy as np
from scipy import linalg

from trial_data import TrialDataset

log = logging.getLogger(__name__)

BASE_DIMENSION = {1: 4, 2: 2, 3: 4, 4: 2}
DEFAULT_HIGH_DIMENSION = 200

# Stratum variable levels and probabilities of the base models. Model 4 stores S in {1, -1}.
STRATUM_LEVELS = {
    1: ((1, 2, 3, 4), (0.2, 0.3, 0.3, 0.2)),
    2: ((1, 2, 3, 4), (0.2, 0.3, 0.3, 0.2)),
    3: ((1, 2), (0.4, 0.6)),
    4: ((1, -1), (0.5, 0.5)),
}

MU = {1: (1.0, 4.0), 2: (-3.0, 0.0), 3: (5.0, 2.0), 4: (5.0, 5.0)}
BETA = {
    1: ((75.0, 35.0, 125.0, 80.0), (100.0, 80.0, 60.0, 40.0)),
    2: ((10.0, 24.0, 15.0, 20.0), (20.0, 17.0, 10.0)),
    3: ((42.0, 83.0), (30.0, 75.0)),
    4: ((20.0, 30.0, 50.0), (20.0, 30.0, 65.0)),
}

# E[X] of Model 1: Beta(3, 4), Unif[-2, 2], {-1, 1}, {3 w.p. 0.6, 5 w.p. 0.4}
MODEL1_COVARIATE_MEANS = (3.0 / 7.0, 0.0, 0.0, 3.8)


@dataclass(frozen=True)
class ModelSpec:
    """
    One data generating model.

    :param int model_id: Model number 1..8.
    :param int n: Number of units.
    :param int p: Total number of covariates. Fixed by Models 1-4, defaults to 200 for Models 5-8.
    """
    model_id: int
    n: int = 1000
    p: Optional[int] = None
    sigma0: float = 1.0
    sigma1: float = 3.0

    def __post_init__(self):
        if self.model_id not in range(1, 9):
            raise ValueError(f"Unknown model {self.model_id}, use 1..8.")
        if self.n < 1:
            raise ValueError("A model needs at least one unit.")
        base = BASE_DIMENSION[self.base_model]
        if self.model_id <= 4:
            if self.p not in (None, base):
                raise ValueError(f"Model {self.model_id} has exactly {base} covariates.")
            object.__setattr__(self, "p", base)
        else:
            if self.p is None:
                object.__setattr__(self, "p", DEFAULT_HIGH_DIMENSION)
            if self.p < base:
                raise ValueError(f"Model {self.model_id} needs p >= {base}.")

    @property
    def base_model(self) -> int:
        return self.model_id if self.model_id <= 4 else self.model_id - 4

    @property
    def base_dimension(self) -> int:
        return BASE_DIMENSION[self.base_model]

    @property
    def stratum_levels(self):
        return STRATUM_LEVELS[self.base_model]


def stratum_variable(spec: ModelSpec, k):
    """
    Value of the randomization variable for stratum index k (1 based).
    """
    levels = np.asarray(spec.stratum_levels[0])
    return levels[np.asarray(k, dtype=np.int64) - 1]


def outcome_mean(model: int, arm: int, X: np.ndarray, S) -> np.ndarray:
    """
    g_a(X) of a base model (1..4). Only the first base-dimension columns of X are used.
    S is the randomization variable, it enters Model 4 only.
    """
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    mu = MU[model][arm]
    beta = BETA[model][arm]
    if model == 1:
        return mu + X[:, :4] @ np.asarray(beta)
    if model == 2:
        if arm == 0:
            return (mu + beta[0] * np.log(x1 + 1) + beta[1] * x1 ** 2
                    + beta[2] * np.exp(x2) + beta[3] / (x2 + 3))
        return mu + beta[0] * np.exp(x1 + 2) + beta[1] / (x1 + 1) + beta[2] * x2 ** 2
    if model == 3:
        x3, x4 = X[:, 2], X[:, 3]
        if arm == 0:
            return mu + beta[0] * x1 * x2 / (x1 + x2 + 2) + beta[1] * x1 ** 2 * (x2 + x3)
        return mu + beta[0] * (x2 + x4) + beta[1] * x2 ** 2 / np.exp(x1 + 2)
    S = np.broadcast_to(np.asarray(S, dtype=np.float64), x1.shape)
    linear = (beta[0] * x1 + beta[1] * x2) * S
    if arm == 0:
        return mu + linear + beta[2] * np.log(x1 + 1) * (S == 1)
    return mu + linear + beta[2] * np.exp(x2) * (S == -1)


def _base_covariates(model: int, n: int, rng: np.random.Generator) -> np.ndarray:
    x1 = rng.beta(3.0, 4.0, size=n)
    x2 = rng.uniform(-2.0, 2.0, size=n)
    if model == 1:
        x3 = rng.choice([-1.0, 1.0], size=n)
        x4 = rng.choice([3.0, 5.0], size=n, p=[0.6, 0.4])
        return np.column_stack([x1, x2, x3, x4])
    if model == 3:
        x3 = rng.standard_normal(n)
        x4 = rng.uniform(0.0, 2.0, size=n)
        return np.column_stack([x1, x2, x3, x4])
    return np.column_stack([x1, x2])


@lru_cache(maxsize=32)
def _noise_cholesky(structure: str, q: int) -> np.ndarray:
    if structure == "toeplitz":
        covariance = linalg.toeplitz(0.5 ** np.arange(q))
    else:
        covariance = np.full((q, q), 0.2)
        np.fill_diagonal(covariance, 1.0)
    factor = linalg.cholesky(covariance, lower=True)
    factor.setflags(write=False)
    return factor


def _extra_covariates(spec: ModelSpec, base: np.ndarray, rng: np.random.Generator):
    q = spec.p - spec.base_dimension
    if q == 0:
        return np.empty((spec.n, 0)), {}
    structure = "toeplitz" if spec.model_id == 7 else "equicorrelated"
    extra = rng.standard_normal((spec.n, q)) @ _noise_cholesky(structure, q).T
    metadata = {}
    if spec.model_id in (6, 8):
        count = min(spec.p // 3, q)
        chosen = np.sort(rng.choice(q, size=count, replace=False))
        parents = rng.integers(0, 2, size=count)
        extra[:, chosen] *= base[:, parents]
        metadata = {
            "interaction_columns": tuple(int(c) + spec.base_dimension for c in chosen),
            "interaction_parents": tuple(int(c) for c in parents),
        }
    return extra, metadata


def generate(spec: ModelSpec, rng: np.random.Generator, pi_target: float = 0.5) -> TrialDataset:
    """
    Draw n i.i.d. units with covariates, stratum and both potential outcomes.

    Treatment is not assigned yet, see `TrialDataset.with_assignment`.

    :param ModelSpec spec: Data generating model.
    :param np.random.Generator rng: Random generator.
    :param float pi_target: Target treated proportion carried by the dataset.
    :return TrialDataset: Dataset with `Y0`, `Y1` and `B`, but without `A` and `Y`.
    """
    model = spec.base_model
    base = _base_covariates(model, spec.n, rng)
    levels, probabilities = spec.stratum_levels
    B = rng.choice(len(levels), size=spec.n, p=probabilities) + 1
    S = stratum_variable(spec, B)
    extra, metadata = _extra_covariates(spec, base, rng)
    eps = rng.standard_normal((spec.n, 2))
    Y0 = outcome_mean(model, 0, base, S) + spec.sigma0 * eps[:, 0]
    Y1 = outcome_mean(model, 1, base, S) + spec.sigma1 * eps[:, 1]
    metadata.update({"model_id": spec.model_id})
    return TrialDataset(X=np.hstack([base, extra]), B=B, pi_target=pi_target, Y0=Y0, Y1=Y1,
                        K=len(levels), stratum_labels=tuple(levels), metadata=metadata)


@dataclass(frozen=True)
class AteTruth:
    """
    True average treatment effect, with its Monte Carlo standard error (0 for closed form).
    """
    tau: float
    se: float = 0.0
    draws: int = 0
    method: str = "closed_form"


def true_ate(spec: ModelSpec, method: str = "closed_form", draws: int = 10 ** 6,
             rng: Optional[np.random.Generator] = None, chunk: int = 250_000) -> AteTruth:
    """
    tau = E[Y(1) - Y(0)] of a model.

    :param ModelSpec spec: Data generating model.
    :param str method: `closed_form` (Models 1 and 5) or `monte_carlo`.
    :param int draws: Number of fresh covariate draws for `monte_carlo`.
    :param np.random.Generator rng: Random generator for `monte_carlo`.
    :raises ValueError: If the closed form is requested for a model without analytic moments.
    :return AteTruth: The effect and its standard error.
    """
    if method == "closed_form":
        if spec.base_model != 1:
            raise ValueError(f"No closed form average treatment effect for model {spec.model_id}.")
        slopes = np.asarray(BETA[1][1]) - np.asarray(BETA[1][0])
        tau = MU[1][1] - MU[1][0] + float(slopes @ np.asarray(MODEL1_COVARIATE_MEANS))
        return AteTruth(tau=tau)
    if method != "monte_carlo":
        raise ValueError(f"Unknown method '{method}'.")
    rng = rng if rng is not None else np.random.default_rng()
    model = spec.base_model
    levels, probabilities = spec.stratum_levels
    total = total_sq = 0.0
    remaining = draws
    while remaining > 0:
        size = min(chunk, remaining)
        base = _base_covariates(model, size, rng)
        S = np.asarray(levels)[rng.choice(len(levels), size=size, p=probabilities)]
        diff = outcome_mean(model, 1, base, S) - outcome_mean(model, 0, base, S)
        total += diff.sum()
        total_sq += (diff ** 2).sum()
        remaining -= size
    mean = total / draws
    variance = max(total_sq / draws - mean ** 2, 0.0) * draws / max(draws - 1, 1)
    truth = AteTruth(tau=mean, se=float(np.sqrt(variance / draws)), draws=draws, method="monte_carlo")
    log.info("Model %d Monte Carlo effect %.4f (se %.4f, %d draws)", spec.model_id, truth.tau, truth.se, draws)
    return truth


def oracle_h(spec: ModelSpec, arm: int, x: np.ndarray, k) -> np.ndarray:
    """
    E[Y(a) | X = x, B = k], the projection that minimizes the estimator variance.

    :param ModelSpec spec: Data generating model.
    :param int arm: 0 or 1.
    :param np.ndarray x: Covariate vector or matrix with p columns.
    :param k: Stratum index (1 based), scalar or one per row.
    :raises ValueError: If the covariate dimension does not match the model.
    :return np.ndarray: Conditional means.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.p:
        raise ValueError(f"Model {spec.model_id} has {spec.p} covariates, got {x.shape[1]}.")
    return outcome_mean(spec.base_model, arm, x, stratum_variable(spec, k))
