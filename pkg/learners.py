"""
Machine learning regressors used as projection functions: lasso, regression trees,
random forest, gradient boosted trees and a one hidden layer neural network.

Every fit function returns an immutable model with `predict(X)` and `size`.
"""

from dataclasses import dataclass
import logging
import math
from typing import Optional, Tuple
import warnings

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso, LassoCV
from sklearn.model_selection import KFold
from sklearn.tree import DecisionTreeRegressor

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """
    y = intercept + X @ coef on the original covariate scale.
    """
    intercept: float
    coef: np.ndarray
    alpha: Optional[float] = None

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.coef))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.atleast_2d(X) @ self.coef


def _standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    active = scale > 0.0
    Z = np.zeros_like(X)
    Z[:, active] = (X[:, active] - center[active]) / scale[active]
    return Z, center, np.where(active, scale, 0.0)


def lasso_alpha_max(X: np.ndarray, y: np.ndarray) -> float:
    """
    Smallest penalty that sets every standardized slope to zero, max_j |z_j' (y - mean y)| / m.
    """
    Z, _, _ = _standardize(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if Z.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Z.T @ (y - y.mean()))) / Z.shape[0])


def fit_lasso(X: np.ndarray, y: np.ndarray, alpha: Optional[float] = None, n_alphas: int = 50,
              cv: int = 5, seed: Optional[int] = None, max_iter: int = 10_000,
              tol: float = 1e-6) -> LinearModel:
    """
    Lasso on standardized columns, minimizing ||y - b0 - Z b||^2 / (2m) + alpha * ||b||_1.

    Without `alpha` the penalty is chosen by K-fold cross validation (minimum mean
    validation error) over `n_alphas` values from `lasso_alpha_max` down four decades.
    Coefficients are returned on the original scale, constant columns get zero.

    :param np.ndarray X: Training covariates (m x p).
    :param np.ndarray y: Training outcomes.
    :param float alpha: Fixed penalty, skips cross validation.
    :param int n_alphas: Size of the penalty grid.
    :param int cv: Number of cross validation folds.
    :param int seed: Seed of the fold shuffling.
    :return LinearModel: Fitted model, `alpha` holds the penalty used.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Z, center, scale = _standardize(X)
    active = scale > 0.0
    alpha_max = lasso_alpha_max(X, y)
    if alpha_max <= 0.0 or not np.any(active):
        return LinearModel(intercept=float(y.mean()), coef=np.zeros(X.shape[1]), alpha=alpha)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        if alpha is None:
            grid = alpha_max * np.logspace(0.0, -4.0, n_alphas)
            folds = KFold(n_splits=max(2, min(cv, Z.shape[0])), shuffle=True, random_state=seed)
            model = LassoCV(alphas=grid, cv=folds, max_iter=max_iter, tol=tol).fit(Z[:, active], y)
            alpha = float(model.alpha_)
        else:
            model = Lasso(alpha=alpha, max_iter=max_iter, tol=tol).fit(Z[:, active], y)

    coef = np.zeros(X.shape[1])
    coef[active] = model.coef_ / scale[active]
    intercept = float(model.intercept_ - coef[active] @ center[active])
    log.debug("Lasso alpha %.4g kept %d of %d columns", alpha, np.count_nonzero(coef), X.shape[1])
    return LinearModel(intercept=intercept, coef=coef, alpha=alpha)


@dataclass(frozen=True, eq=False)
class TreeModel:
    """
    A fitted scikit-learn tree or forest.
    """
    estimator: object

    @property
    def size(self) -> int:
        if hasattr(self.estimator, "estimators_"):
            return int(sum(tree.get_n_leaves() for tree in self.estimator.estimators_))
        return int(self.estimator.get_n_leaves())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.estimator.predict(np.atleast_2d(X))


def fit_cart(X: np.ndarray, y: np.ndarray, max_depth: int = 6, min_samples_leaf: int = 10,
             seed: Optional[int] = None) -> TreeModel:
    """
    Regression tree grown by greedy variance reduction.
    """
    tree = DecisionTreeRegressor(max_depth=max_depth, min_samples_leaf=min_samples_leaf, random_state=seed)
    return TreeModel(tree.fit(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)))


def fit_random_forest(X: np.ndarray, y: np.ndarray, n_trees: int = 200, min_samples_leaf: int = 5,
                      max_features: Optional[int] = None, seed: Optional[int] = None) -> TreeModel:
    """
    Bagged regression trees on bootstrap resamples. Each split draws ceil(p/3)
    candidate columns unless `max_features` is given.
    """
    X = np.asarray(X, dtype=np.float64)
    if max_features is None:
        max_features = max(1, math.ceil(X.shape[1] / 3))
    forest = RandomForestRegressor(n_estimators=n_trees, min_samples_leaf=min_samples_leaf,
                                   max_features=min(max_features, X.shape[1]), bootstrap=True,
                                   random_state=seed)
    return TreeModel(forest.fit(X, np.asarray(y, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class BoostedTrees:
    """
    init + learning_rate * sum of the stage trees.
    """
    init: float
    learning_rate: float
    trees: Tuple[DecisionTreeRegressor, ...]

    @property
    def size(self) -> int:
        return len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.full(X.shape[0], self.init)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out


def fit_gbrt(X: np.ndarray, y: np.ndarray, n_rounds: int = 200, max_depth: int = 3,
             learning_rate: float = 0.1, seed: Optional[int] = None) -> BoostedTrees:
    """
    Stagewise least squares boosting: start at the mean, fit each shallow tree to
    the current residuals and add it with shrinkage. Zero rounds give the mean.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    init = float(y.mean())
    fitted = np.full(y.shape[0], init)
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_rounds):
        residual = y - fitted
        if not np.any(residual):
            break
        tree = DecisionTreeRegressor(max_depth=max_depth, random_state=int(rng.integers(2 ** 31 - 1)))
        tree.fit(X, residual)
        fitted += learning_rate * tree.predict(X)
        trees.append(tree)
    return BoostedTrees(init=init, learning_rate=learning_rate, trees=tuple(trees))


TREE_KINDS = {"cart": fit_cart, "random_forest": fit_random_forest, "gbrt": fit_gbrt}


def fit_tree_family(X: np.ndarray, y: np.ndarray, kind: str, seed: Optional[int] = None, **params):
    """
    Fit a CART, random forest or gradient boosted model.

    :param str kind: One of `cart`, `random_forest`, `gbrt`.
    :param params: Hyperparameters of the chosen fitter.
    :raises ValueError: For another kind.
    """
    if kind not in TREE_KINDS:
        raise ValueError(f"Unknown tree kind '{kind}', expected one of {sorted(TREE_KINDS)}.")
    return TREE_KINDS[kind](X, y, seed=seed, **params)


def _unpack(theta: np.ndarray, d: int, width: int):
    W1 = theta[:d * width].reshape(d, width)
    b1 = theta[d * width:d * width + width]
    w2 = theta[d * width + width:d * width + 2 * width]
    b2 = theta[-1]
    return W1, b1, w2, b2


def parameter_count(d: int, width: int) -> int:
    return d * width + 2 * width + 1


def mlp_forward(theta: np.ndarray, Z: np.ndarray, width: int) -> np.ndarray:
    W1, b1, w2, b2 = _unpack(theta, Z.shape[1], width)
    return np.tanh(Z @ W1 + b1) @ w2 + b2


def loss_and_gradient(theta: np.ndarray, Z: np.ndarray, t: np.ndarray, width: int,
                      weight_decay: float) -> Tuple[float, np.ndarray]:
    """
    Half mean squared error plus weight decay on the weights (not the biases),
    and its gradient with respect to the packed parameter vector.

    :param np.ndarray theta: Packed parameters (W1, b1, w2, b2).
    :param np.ndarray Z: Standardized inputs (m x d).
    :param np.ndarray t: Standardized targets.
    :param int width: Number of hidden units.
    :param float weight_decay: Penalty on the squared weights.
    :return tuple: Loss and gradient.
    """
    m, d = Z.shape
    W1, b1, w2, b2 = _unpack(theta, d, width)
    hidden = np.tanh(Z @ W1 + b1)
    error = hidden @ w2 + b2 - t
    loss = 0.5 * float(np.mean(error ** 2)) + 0.5 * weight_decay * float(np.sum(W1 ** 2) + np.sum(w2 ** 2))
    e = error / m
    back = np.outer(e, w2) * (1.0 - hidden ** 2)
    gradient = np.concatenate([
        (Z.T @ back + weight_decay * W1).ravel(),
        back.sum(axis=0),
        hidden.T @ e + weight_decay * w2,
        [e.sum()],
    ])
    return loss, gradient


@dataclass(frozen=True, eq=False)
class MLPModel:
    """
    One hidden layer tanh network with linear output, trained on standardized data.
    """
    theta: np.ndarray
    width: int
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float
    final_loss: float = 0.0

    @property
    def size(self) -> int:
        return int(self.theta.shape[0])

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.x_center) / self.x_scale
        if self.y_scale == 0.0:
            return np.full(Z.shape[0], self.y_center)
        return self.y_center + self.y_scale * mlp_forward(self.theta, Z, self.width)


def fit_mlp(X: np.ndarray, y: np.ndarray, width: int = 10, epochs: int = 500, learning_rate: float = 0.01,
            weight_decay: float = 0.01, seed: Optional[int] = None) -> MLPModel:
    """
    Train a one hidden layer network with full batch Adam steps for a fixed number of epochs.

    :param np.ndarray X: Training covariates (m x p).
    :param np.ndarray y: Training outcomes.
    :param int width: Number of hidden units.
    :param int epochs: Number of full batch updates.
    :param float learning_rate: Adam step size.
    :param float weight_decay: Penalty on the squared weights.
    :param int seed: Seed of the weight initialization.
    :return MLPModel: The trained network.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_center = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale = np.where(x_scale > 0.0, x_scale, 1.0)
    y_center = float(y.mean())
    y_scale = float(y.std())
    d = X.shape[1]
    if y_scale == 0.0:
        return MLPModel(theta=np.zeros(parameter_count(d, width)), width=width, x_center=x_center,
                        x_scale=x_scale, y_center=y_center, y_scale=0.0)
    Z = (X - x_center) / x_scale
    t = (y - y_center) / y_scale

    rng = np.random.default_rng(seed)
    theta = np.concatenate([
        rng.normal(0.0, 1.0 / math.sqrt(max(d, 1)), d * width),
        np.zeros(width),
        rng.normal(0.0, 1.0 / math.sqrt(width), width),
        [0.0],
    ])
    first = np.zeros_like(theta)
    second = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    loss = float("nan")
    for step in range(1, epochs + 1):
        loss, gradient = loss_and_gradient(theta, Z, t, width, weight_decay)
        first = beta1 * first + (1.0 - beta1) * gradient
        second = beta2 * second + (1.0 - beta2) * gradient ** 2
        theta = theta - learning_rate * (first / (1.0 - beta1 ** step)) / (
            np.sqrt(second / (1.0 - beta2 ** step)) + eps)
    log.debug("MLP width %d trained %d epochs, loss %.4g", width, epochs, loss)
    return MLPModel(theta=theta, width=width, x_center=x_center, x_scale=x_scale,
                    y_center=y_center, y_scale=y_scale, final_loss=loss)
