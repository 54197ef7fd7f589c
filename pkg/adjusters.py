"""
Projection functions h_k(x, a) fitted per arm, pooled over strata or per stratum.
"""

from dataclasses import dataclass, field
from functools import partial
import logging
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from datagen import ModelSpec, oracle_h
from estimators import EstimationError
import learners
import smoothers
from trial_data import TrialDataset

log = logging.getLogger(__name__)

KINDS = ("zero", "ols", "lasso", "local_linear_kernel", "natural_spline", "cart", "random_forest",
         "gbrt", "mlp", "oracle")

DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "zero": {},
    "ols": {},
    "lasso": {"alpha": None, "n_alphas": 50, "cv": 5},
    "local_linear_kernel": {"bandwidth_factor": 1.06, "bandwidth": None, "degree": 1, "min_points": None},
    "natural_spline": {"df": 5},
    "cart": {"max_depth": 6, "min_samples_leaf": 10},
    "random_forest": {"n_trees": 200, "min_samples_leaf": 5, "max_features": None},
    "gbrt": {"n_rounds": 200, "max_depth": 3, "learning_rate": 0.1},
    "mlp": {"width": 10, "epochs": 500, "learning_rate": 0.01, "weight_decay": 0.01},
    "oracle": {},
}

# parameters that must be positive when given, the rest only nonnegative
_POSITIVE = {"n_alphas", "cv", "bandwidth_factor", "bandwidth", "min_points", "df", "max_depth", "min_samples_leaf",
             "n_trees", "max_features", "learning_rate", "width"}
_INTEGER = {"n_alphas", "cv", "degree", "min_points", "df", "max_depth", "min_samples_leaf", "n_trees", "max_features",
            "n_rounds", "width", "epochs"}

STRATUM_CELL_MINIMUM = 10
# kinds solving a least squares problem in all d covariates per cell
_DIMENSION_BOUND = ("ols", "local_linear_kernel", "natural_spline")


@dataclass(frozen=True)
class AdjusterSpec:
    """
    Kind and hyperparameters of a projection function fit.

    :param str kind: One of `KINDS`.
    :param bool stratum_specific: Fit one function per stratum and arm instead of one per arm.
    :param dict params: Hyperparameter overrides, see `DEFAULT_PARAMS`.
    :param ModelSpec model: Data generating model, required by the oracle kind.
    """
    kind: str = "zero"
    stratum_specific: bool = False
    params: Mapping[str, Any] = field(default_factory=dict)
    model: Optional[ModelSpec] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown adjuster kind '{self.kind}', use one of {KINDS}.")
        allowed = DEFAULT_PARAMS[self.kind]
        for key, value in self.params.items():
            if key not in allowed:
                raise ValueError(f"Adjuster '{self.kind}' has no parameter '{key}'.")
            if value is None:
                continue
            if key in _INTEGER and int(value) != value:
                raise ValueError(f"Adjuster parameter '{key}' must be an integer, got {value}.")
            if value < 0 or (key in _POSITIVE and value == 0):
                raise ValueError(f"Adjuster parameter '{key}' out of range: {value}.")
        if self.kind == "local_linear_kernel" and self.hyperparameters["degree"] not in (0, 1):
            raise ValueError("Kernel degree must be 0 or 1.")
        if self.kind == "oracle" and self.model is None:
            raise ValueError("The oracle adjuster needs the data generating model.")

    @property
    def hyperparameters(self) -> Dict[str, Any]:
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        return merged

    @classmethod
    def from_strings(cls, kind: str, stratum_specific: bool = False,
                     overrides: Optional[Mapping[str, str]] = None,
                     model: Optional[ModelSpec] = None) -> "AdjusterSpec":
        """
        Build a spec from textual `key=value` overrides as found in config files and on the command line.
        """
        if kind not in KINDS:
            raise ValueError(f"Unknown adjuster kind '{kind}', use one of {KINDS}.")
        params = {}
        for key, text in (overrides or {}).items():
            if key not in DEFAULT_PARAMS[kind]:
                raise ValueError(f"Adjuster '{kind}' has no parameter '{key}'.")
            text = str(text).strip()
            if text.lower() in ("none", ""):
                params[key] = None
            elif key in _INTEGER:
                params[key] = int(text)
            else:
                params[key] = float(text)
        return cls(kind=kind, stratum_specific=stratum_specific, params=params, model=model)

    def minimum_size(self, d: int) -> int:
        """
        Fewest training units one fitted function needs for `d` covariates.
        """
        hp = self.hyperparameters
        if self.kind in ("zero", "oracle"):
            return 0
        if self.kind == "local_linear_kernel":
            return d + 2
        if self.kind == "natural_spline":
            return hp["df"] * d + 2
        if self.kind in ("cart", "random_forest"):
            return 2 * hp["min_samples_leaf"]
        if self.kind == "mlp":
            return 20
        return 2


def _zero(X: np.ndarray) -> np.ndarray:
    return np.zeros(np.atleast_2d(X).shape[0])


def _fit_model(spec: AdjusterSpec, X: np.ndarray, y: np.ndarray, seed: int):
    hp = spec.hyperparameters
    if spec.kind == "ols":
        coef = smoothers.jittered_lstsq(np.column_stack([np.ones(X.shape[0]), X]), y)
        return learners.LinearModel(intercept=float(coef[0]), coef=coef[1:])
    if spec.kind == "lasso":
        return learners.fit_lasso(X, y, alpha=hp["alpha"], n_alphas=hp["n_alphas"], cv=hp["cv"], seed=seed)
    if spec.kind == "local_linear_kernel":
        return smoothers.fit_local_linear_kernel(X, y, bandwidth_factor=hp["bandwidth_factor"],
                                                 bandwidth=hp["bandwidth"], degree=hp["degree"],
                                                 min_points=hp["min_points"])
    if spec.kind == "natural_spline":
        return smoothers.fit_natural_spline(X, y, df=hp["df"])
    if spec.kind in learners.TREE_KINDS:
        return learners.fit_tree_family(X, y, spec.kind, seed=seed, **hp)
    if spec.kind == "mlp":
        return learners.fit_mlp(X, y, width=hp["width"], epochs=hp["epochs"], learning_rate=hp["learning_rate"],
                                weight_decay=hp["weight_decay"], seed=seed)
    raise NotImplementedError(f"No training for adjuster kind '{spec.kind}'.")


@dataclass(frozen=True)
class FitDiagnostics:
    m: int
    mse: float
    size: int


@dataclass(frozen=True, eq=False)
class ProjectionFit:
    """
    Fitted projection functions.

    `pooled[a]` is the function of arm a shared by all strata; `by_stratum[(a, k)]`
    the function of arm a in stratum k. Diagnostics use stratum 0 for pooled fits.
    """
    spec: AdjusterSpec
    p: int
    pooled: Dict[int, Callable[[np.ndarray], np.ndarray]]
    by_stratum: Dict[Tuple[int, int], Callable[[np.ndarray], np.ndarray]] = field(default_factory=dict)
    diagnostics: Dict[Tuple[int, int], FitDiagnostics] = field(default_factory=dict)
    models: Dict[Tuple[int, int], Any] = field(default_factory=dict)
    fallbacks: Tuple[Tuple[int, int], ...] = ()

    def _function(self, arm: int, k: int) -> Callable[[np.ndarray], np.ndarray]:
        function = self.by_stratum.get((arm, k))
        if function is None:
            function = self.pooled.get(arm)
        if function is None:
            raise ValueError(f"No projection function for arm {arm} in stratum {k}.")
        return function

    def predict(self, x: np.ndarray, arm: int, k) -> np.ndarray:
        """
        Evaluate h_k(x, a).

        :param np.ndarray x: One covariate vector or a matrix with one row per unit.
        :param int arm: 0 or 1.
        :param k: Stratum (1..K), scalar or one per row.
        :raises ValueError: If the covariate dimension differs from the training data.
        :return np.ndarray: One value per row.
        """
        if arm not in (0, 1):
            raise ValueError(f"Arm must be 0 or 1, got {arm}.")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.p:
            raise ValueError(f"Fitted on {self.p} covariates, got {x.shape[1]}.")
        strata = np.broadcast_to(np.asarray(k, dtype=np.int64), (x.shape[0],))
        out = np.empty(x.shape[0])
        for label in np.unique(strata):
            rows = strata == label
            out[rows] = self._function(arm, int(label))(x[rows])
        return out

    def coefficients(self, arm: int, k: int = 0) -> Tuple[float, np.ndarray]:
        """
        Intercept and slopes of a linear (ols or lasso) fit, stratum 0 for the pooled fit.
        """
        model = self.models.get((arm, k)) or self.models.get((arm, 0))
        if not isinstance(model, learners.LinearModel):
            raise ValueError(f"Adjuster '{self.spec.kind}' has no linear coefficients.")
        return model.intercept, model.coef


def fit(spec: AdjusterSpec, ds: TrialDataset, rng: np.random.Generator) -> ProjectionFit:
    """
    Fit h(., a) on the units with A = a, per stratum if `spec.stratum_specific` is set.

    Stratum cells with fewer than max(10, kind minimum) units, and for least squares
    kinds fewer than d+2, use the pooled fit of their arm.

    :param AdjusterSpec spec: Kind and hyperparameters.
    :param TrialDataset ds: Dataset with assignments and observed outcomes.
    :param np.random.Generator rng: Source of the per fit seeds.
    :raises EstimationError: If an arm has too few units for a pooled fit.
    :return ProjectionFit: The fitted functions.
    """
    if spec.kind == "zero":
        return ProjectionFit(spec=spec, p=ds.p, pooled={0: _zero, 1: _zero})
    if spec.kind == "oracle":
        if spec.model.p != ds.p:
            raise ValueError(f"Oracle model has {spec.model.p} covariates, dataset {ds.p}.")
        by_stratum = {(a, k): partial(oracle_h, spec.model, a, k=k) for a in (0, 1) for k in range(1, ds.K + 1)}
        return ProjectionFit(spec=spec, p=ds.p, pooled={}, by_stratum=by_stratum)
    if ds.A is None or ds.Y is None:
        raise ValueError("Fitting projection functions needs assignments and observed outcomes.")

    seeds = rng.integers(0, 2 ** 31 - 1, size=(2, ds.K + 1))
    minimum = spec.minimum_size(ds.p)
    cell_minimum = max(STRATUM_CELL_MINIMUM, minimum, ds.p + 2 if spec.kind in _DIMENSION_BOUND else 0)
    pooled, by_stratum, diagnostics, models = {}, {}, {}, {}
    fallbacks = []

    def train(arm, k, rows):
        X, y = ds.X[rows], ds.Y[rows]
        model = _fit_model(spec, X, y, int(seeds[arm, k]))
        residual = y - model.predict(X)
        diagnostics[(arm, k)] = FitDiagnostics(m=int(rows.sum()), mse=float(np.mean(residual ** 2)),
                                               size=int(model.size))
        models[(arm, k)] = model
        return model.predict

    for arm in (0, 1):
        in_arm = ds.A == arm
        cells = {k: in_arm & (ds.B == k) for k in range(1, ds.K + 1)} if spec.stratum_specific else {}
        small = [k for k, rows in cells.items() if rows.sum() < cell_minimum]
        if not spec.stratum_specific or small:
            if in_arm.sum() < max(minimum, 1):
                raise EstimationError(
                    f"arm {arm} has {int(in_arm.sum())} units, adjuster '{spec.kind}' needs {minimum}")
            pooled[arm] = train(arm, 0, in_arm)
        for k, rows in cells.items():
            if k in small:
                log.warning("Stratum %d arm %d has %d units (< %d), using the pooled %s fit",
                            k, arm, int(rows.sum()), cell_minimum, spec.kind)
                fallbacks.append((arm, k))
                continue
            by_stratum[(arm, k)] = train(arm, k, rows)
    return ProjectionFit(spec=spec, p=ds.p, pooled=pooled, by_stratum=by_stratum,
                         diagnostics=diagnostics, models=models, fallbacks=tuple(fallbacks))


def predict(projection: ProjectionFit, x: np.ndarray, arm: int, k) -> np.ndarray:
    return projection.predict(x, arm, k)
