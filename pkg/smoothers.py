"""
Nonparametric smoothers used as projection functions.

- local polynomial (linear or constant) kernel regression with a product
  Epanechnikov kernel and a diagonal rule of thumb bandwidth
- additive natural cubic spline regression with knots at quantiles
"""

from dataclasses import dataclass, replace
import logging
from typing import Optional, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e10
JITTER = 1e-8
# window widening for sparse queries, as multiples of the bandwidth
WIDEN_MARGIN = 1.1
WIDEN_LIMIT = 3.0
QUERY_CHUNK_ELEMENTS = 4_000_000


def jittered_solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Solve a (stack of) symmetric normal equations.

    Systems whose condition estimate exceeds 1e10 get 1e-8 * trace / size added to the diagonal.

    :param np.ndarray gram: Matrix of shape (..., q, q).
    :param np.ndarray rhs: Right hand side of shape (..., q).
    :return np.ndarray: Solutions of shape (..., q).
    """
    size = gram.shape[-1]
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(gram)
    bad = ~np.isfinite(condition) | (condition > CONDITION_LIMIT)
    if np.any(bad):
        log.debug("Adding ridge jitter to %d ill-conditioned local systems", int(np.sum(bad)))
        gram = np.array(gram, dtype=np.float64)
        ridge = JITTER * np.trace(gram, axis1=-2, axis2=-1) / size
        ridge = np.where(bad, ridge, 0.0)
        gram += ridge[..., None, None] * np.eye(size)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def jittered_lstsq(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Least squares coefficients of y on design. An ill-conditioned design is
    augmented by ridge rows so the jitter matches `jittered_solve`.
    """
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(design)
    if np.isfinite(condition) and condition ** 2 <= CONDITION_LIMIT:
        return np.linalg.lstsq(design, y, rcond=None)[0]
    size = design.shape[1]
    ridge = JITTER * float(np.sum(design ** 2)) / size
    log.debug("Least squares design ill-conditioned, ridge %.3g", ridge)
    augmented = np.vstack([design, np.sqrt(ridge) * np.eye(size)])
    return np.linalg.lstsq(augmented, np.concatenate([y, np.zeros(size)]), rcond=None)[0]


def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True, eq=False)
class KernelSmoother:
    """
    Local polynomial kernel regression fitted on one training subset.

    The local design uses covariate differences divided by the training standard
    deviation, so an infinite bandwidth reproduces global least squares. A query
    whose window holds fewer than `min_points` training units has its window
    widened until it does, by at most `WIDEN_LIMIT`; beyond that the global
    least squares fit is used.
    """
    X: np.ndarray
    y: np.ndarray
    columns: np.ndarray
    scale: np.ndarray
    bandwidth: np.ndarray
    degree: int
    ols_coef: np.ndarray
    min_points: int = 1

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def bandwidth_matrix(self) -> np.ndarray:
        """
        Diagonal H^(1/2) on the kept columns.
        """
        return np.diag(self.bandwidth)

    def weights(self, x: np.ndarray, widen: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Product Epanechnikov weights K_H(X_j - x) of every training point for every query row.

        :param np.ndarray x: Query rows on the kept columns.
        :param np.ndarray widen: Optional factor per query row applied to the bandwidth.
        """
        h = self.bandwidth if widen is None else widen[:, None, None] * self.bandwidth
        u = (self.X[None, :, :] - x[:, None, :]) / h
        return np.prod(np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u ** 2), 0.0), axis=2)

    def widening(self, x: np.ndarray) -> np.ndarray:
        """
        Bandwidth factor per query row that puts `min_points` training units strictly
        inside the window, 1 where the plain window already does, inf where more than
        `WIDEN_LIMIT` would be needed.
        """
        factor = np.ones(x.shape[0])
        if x.shape[1] == 0:
            return factor
        with np.errstate(invalid="ignore"):
            reach = np.max(np.abs(self.X[None, :, :] - x[:, None, :]) / self.bandwidth, axis=2)
        reach = np.nan_to_num(reach, nan=0.0)
        kth = np.partition(reach, self.min_points - 1, axis=1)[:, self.min_points - 1]
        short = kth >= 1.0
        factor[short] = WIDEN_MARGIN * kth[short]
        factor[factor > WIDEN_LIMIT] = np.inf
        return factor

    def window_counts(self, x: np.ndarray) -> np.ndarray:
        """
        Training units with positive weight per query row after widening, 0 for rows
        answered by the global least squares fit.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))[:, self.columns]
        factor = self.widening(x)
        counts = np.zeros(x.shape[0], dtype=np.int64)
        local = np.isfinite(factor)
        if np.any(local):
            counts[local] = np.count_nonzero(self.weights(x[local], factor[local]) > 0.0, axis=1)
        return counts

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))[:, self.columns]
        d = x.shape[1]
        out = np.empty(x.shape[0])
        chunk = max(1, QUERY_CHUNK_ELEMENTS // max(1, self.X.shape[0] * max(d, 1)))
        for start in range(0, x.shape[0], chunk):
            out[start:start + chunk] = self._predict_chunk(x[start:start + chunk])
        return out

    def _predict_chunk(self, x: np.ndarray) -> np.ndarray:
        factor = self.widening(x)
        fitted = np.empty(x.shape[0])
        global_rows = ~np.isfinite(factor)
        if np.any(global_rows):
            fitted[global_rows] = _with_intercept(x[global_rows]) @ self.ols_coef
        live = ~global_rows
        if not np.any(live):
            return fitted
        x = x[live]
        W = self.weights(x, factor[live])
        total = W.sum(axis=1)
        if self.degree == 0:
            fitted[live] = (W @ self.y) / total
            return fitted
        D = (self.X[None, :, :] - x[:, None, :]) / self.scale
        q = D.shape[2] + 1
        gram = np.empty((W.shape[0], q, q))
        gram[:, 0, 0] = total
        cross = np.einsum("cm,cmi->ci", W, D)
        gram[:, 0, 1:] = cross
        gram[:, 1:, 0] = cross
        gram[:, 1:, 1:] = np.einsum("cm,cmi,cmj->cij", W, D, D)
        rhs = np.empty((W.shape[0], q))
        rhs[:, 0] = W @ self.y
        rhs[:, 1:] = np.einsum("cm,cmi,m->ci", W, D, self.y)
        fitted[live] = jittered_solve(gram, rhs)[:, 0]
        return fitted


def rule_of_thumb_bandwidth(scale: np.ndarray, m: int, factor: float = 1.06) -> np.ndarray:
    """
    h_j = factor * sd_j * m^(-1/(d+4)).
    """
    d = scale.shape[0]
    return factor * scale * m ** (-1.0 / (d + 4))


def fit_local_linear_kernel(X: np.ndarray, y: np.ndarray, bandwidth_factor: float = 1.06,
                            bandwidth: Optional[Union[float, np.ndarray]] = None,
                            degree: int = 1, min_points: Optional[int] = None) -> KernelSmoother:
    """
    Fit a local linear (degree 1) or local constant (degree 0) kernel smoother.

    Constant columns carry no information for the kernel and are dropped.

    :param np.ndarray X: Training covariates (m x p).
    :param np.ndarray y: Training outcomes.
    :param float bandwidth_factor: Constant of the rule of thumb bandwidth.
    :param bandwidth: Explicit bandwidth (scalar or one per column, `np.inf` allowed), overrides the rule.
    :param int degree: 1 for local linear, 0 for Nadaraya-Watson.
    :param int min_points: Fewest training units inside a query window, default 5 (d + 1), at most m.
    :raises ValueError: For an unsupported degree.
    :return KernelSmoother: The smoother.
    """
    if degree not in (0, 1):
        raise ValueError(f"Kernel smoother degree {degree} not supported, use 0 or 1.")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = X.shape[0]
    scale = X.std(axis=0, ddof=1) if m > 1 else np.zeros(X.shape[1])
    columns = np.flatnonzero(scale > 0.0)
    scale = scale[columns]
    if bandwidth is None:
        h = rule_of_thumb_bandwidth(scale, m, bandwidth_factor)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (X.shape[1],))[columns]
    Xk = X[:, columns]
    if min_points is None:
        min_points = 5 * (columns.shape[0] + 1)
    min_points = max(1, min(int(min_points), m))
    ols_coef = jittered_lstsq(_with_intercept(Xk), y)
    return KernelSmoother(X=Xk, y=y, columns=columns, scale=scale, bandwidth=np.asarray(h, dtype=np.float64),
                          degree=degree, ols_coef=ols_coef, min_points=min_points)


def natural_cubic_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """
    Truncated power basis of the natural cubic spline with the given knots, without
    the constant: x, N_3(x), ..., N_K(x). Linear beyond the boundary knots.
    """
    knots = np.asarray(knots, dtype=np.float64)
    last = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    d_last = d(knots.shape[0] - 2)
    columns = [x] + [d(k) - d_last for k in range(knots.shape[0] - 2)]
    return np.column_stack(columns)


@dataclass(frozen=True, eq=False)
class NaturalSplineModel:
    """
    Additive natural cubic spline regression. Each active column is standardized and
    either expanded in a spline basis (`knots[j]` set) or entered linearly.
    """
    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    knots: Tuple[Optional[np.ndarray], ...]
    coef: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return 0 if self.coef is None else int(self.coef.shape[0])

    def design(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.center) / self.scale
        blocks = [np.ones((Z.shape[0], 1))]
        for j in np.flatnonzero(self.active):
            knots = self.knots[j]
            blocks.append(Z[:, [j]] if knots is None else natural_cubic_basis(Z[:, j], knots))
        return np.hstack(blocks)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.design(X) @ self.coef


def fit_natural_spline(X: np.ndarray, y: np.ndarray, df: int = 5) -> NaturalSplineModel:
    """
    Fit an additive natural cubic spline model by least squares.

    Every continuous column gets df+1 knots at equally spaced quantiles, which
    yields df basis columns. Columns with at most df+1 distinct values enter linearly,
    constant columns are left out.

    :param np.ndarray X: Training covariates (m x p).
    :param np.ndarray y: Training outcomes.
    :param int df: Degrees of freedom per continuous column, at least 1.
    :raises ValueError: If df < 1.
    :return NaturalSplineModel: The fitted model.
    """
    if df < 1:
        raise ValueError(f"Spline degrees of freedom {df} must be positive.")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scale = X.std(axis=0)
    active = scale > 0.0
    scale = np.where(active, scale, 1.0)
    center = X.mean(axis=0)
    Z = (X - center) / scale
    knots = []
    for j in range(X.shape[1]):
        if not active[j] or df == 1 or np.unique(Z[:, j]).shape[0] <= df + 1:
            knots.append(None)
            continue
        grid = np.unique(np.quantile(Z[:, j], np.linspace(0.0, 1.0, df + 1)))
        knots.append(grid if grid.shape[0] >= 3 else None)
    model = NaturalSplineModel(center=center, scale=scale, active=active, knots=tuple(knots))
    return replace(model, coef=jittered_lstsq(model.design(X), y))
