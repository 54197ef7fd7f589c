"""
Treatment assignment mechanisms for stratified randomization.

All mechanisms process units in dataset order, which is taken as arrival order.
Assignments depend only on the stratification variables and the random generator.
"""

from collections import defaultdict
from dataclasses import dataclass
import logging
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("simple", "stratified_block", "efron_biased_coin", "minimization")


@dataclass(frozen=True)
class RandomizerConfig:
    """
    Settings of one assignment mechanism.

    `block_size` is used by stratified block randomization, `coin_prob` by the biased
    coin and by minimization, `weights` (one per stratification factor) by minimization.
    """
    kind: str = "simple"
    pi_target: float = 0.5
    block_size: int = 6
    coin_prob: float = 0.75
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown randomizer kind '{self.kind}', use one of {KINDS}.")
        if not 0.0 < self.pi_target < 1.0:
            raise ValueError(f"Target proportion {self.pi_target} outside (0, 1).")
        if not 0.5 < self.coin_prob <= 1.0:
            raise ValueError(f"Biased coin probability {self.coin_prob} outside (0.5, 1].")
        if self.kind == "stratified_block":
            if self.block_size < 1:
                raise ValueError(f"Block size {self.block_size} must be positive.")
            _treated_per_block(self.block_size, self.pi_target)
        if self.kind == "efron_biased_coin" and self.pi_target != 0.5:
            raise ValueError("Efron's biased coin is defined for equal allocation (pi = 1/2) only.")
        if self.weights is not None and any(w < 0 for w in self.weights):
            raise ValueError("Minimization weights must be nonnegative.")


def _treated_per_block(block_size: int, pi: float) -> int:
    treated = block_size * pi
    if abs(treated - round(treated)) > 1e-9:
        raise ValueError(
            f"Block size {block_size} times target proportion {pi} is not an integer.")
    return int(round(treated))


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5 + 1e-12))


def simple_randomize(n: int, pi: float, rng: np.random.Generator) -> np.ndarray:
    """
    Independent Bernoulli(pi) assignments.
    """
    if n < 1:
        raise ValueError("At least one unit is needed.")
    return (rng.random(n) < pi).astype(np.int64)


def stratified_block(B: np.ndarray, cfg: RandomizerConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Permuted blocks within every stratum.

    Every complete block of `block_size` consecutive arrivals of a stratum holds exactly
    `block_size * pi` treated units at uniformly permuted positions. A final incomplete
    block of size s gets round-half-up(s * pi) treated units.

    :param np.ndarray B: Stratum labels in arrival order.
    :param RandomizerConfig cfg: Settings, `block_size * pi_target` must be integral.
    :param np.random.Generator rng: Random generator.
    :raises ValueError: If `block_size * pi_target` is not an integer.
    :return np.ndarray: Assignments in {0, 1}.
    """
    per_block = _treated_per_block(cfg.block_size, cfg.pi_target)
    B = np.asarray(B)
    A = np.zeros(B.shape[0], dtype=np.int64)
    for label in np.unique(B):
        members = np.flatnonzero(B == label)
        for start in range(0, members.shape[0], cfg.block_size):
            block = members[start:start + cfg.block_size]
            size = block.shape[0]
            treated = per_block if size == cfg.block_size else _round_half_up(size * cfg.pi_target)
            A[block[rng.permutation(size)[:treated]]] = 1
    return A


def efron_biased_coin(B: np.ndarray, cfg: RandomizerConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Efron's biased coin applied separately within each stratum: with zero imbalance
    toss a fair coin, else favour the under-represented arm with `coin_prob`.
    """
    if cfg.pi_target != 0.5:
        raise ValueError("Efron's biased coin is defined for equal allocation (pi = 1/2) only.")
    B = np.asarray(B)
    A = np.zeros(B.shape[0], dtype=np.int64)
    imbalance = defaultdict(int)
    for i, label in enumerate(B):
        difference = imbalance[label]
        if difference == 0:
            p_treat = 0.5
        elif difference > 0:
            p_treat = 1.0 - cfg.coin_prob
        else:
            p_treat = cfg.coin_prob
        A[i] = int(rng.random() < p_treat)
        imbalance[label] += 1 if A[i] else -1
    return A


def pocock_simon_minimization(Z: np.ndarray, cfg: RandomizerConfig,
                              rng: np.random.Generator) -> np.ndarray:
    """
    Pocock-Simon minimization over q stratification factors.

    For an arriving unit the imbalance of each of its factor levels is
    |T/pi - C/(1-pi)| computed with the unit hypothetically added to either arm;
    the weighted sum over factors decides the preferred arm, which is taken with
    probability `coin_prob`. Ties are broken by a Bernoulli(pi) draw.

    :param np.ndarray Z: n x q matrix of factor levels in arrival order.
    :param RandomizerConfig cfg: Settings, `weights` defaults to equal weights.
    :param np.random.Generator rng: Random generator.
    :return np.ndarray: Assignments in {0, 1}.
    """
    Z = np.asarray(Z)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    n, q = Z.shape
    if q < 1:
        raise ValueError("Minimization needs at least one stratification factor.")
    weights = np.ones(q) if cfg.weights is None else np.asarray(cfg.weights, dtype=np.float64)
    if weights.shape[0] != q:
        raise ValueError(f"{weights.shape[0]} minimization weights for {q} factors.")
    pi = cfg.pi_target
    treated = [defaultdict(int) for _ in range(q)]
    controls = [defaultdict(int) for _ in range(q)]
    A = np.zeros(n, dtype=np.int64)
    for i in range(n):
        score_treat = score_control = 0.0
        for j in range(q):
            level = Z[i, j]
            t, c = treated[j][level], controls[j][level]
            score_treat += weights[j] * abs((t + 1) / pi - c / (1 - pi))
            score_control += weights[j] * abs(t / pi - (c + 1) / (1 - pi))
        if np.isclose(score_treat, score_control, rtol=0.0, atol=1e-12):
            p_treat = pi
        elif score_treat < score_control:
            p_treat = cfg.coin_prob
        else:
            p_treat = 1.0 - cfg.coin_prob
        A[i] = int(rng.random() < p_treat)
        for j in range(q):
            if A[i]:
                treated[j][Z[i, j]] += 1
            else:
                controls[j][Z[i, j]] += 1
    return A


def randomize(cfg: RandomizerConfig, B: np.ndarray, rng: np.random.Generator,
              Z: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Assign treatments with the mechanism named by `cfg.kind`.

    :param RandomizerConfig cfg: Mechanism settings.
    :param np.ndarray B: Stratum labels in arrival order.
    :param np.random.Generator rng: Random generator.
    :param np.ndarray Z: Minimization factors, defaults to the stratum labels.
    :return np.ndarray: Assignments in {0, 1}.
    """
    if cfg.kind == "simple":
        A = simple_randomize(len(B), cfg.pi_target, rng)
    elif cfg.kind == "stratified_block":
        A = stratified_block(B, cfg, rng)
    elif cfg.kind == "efron_biased_coin":
        A = efron_biased_coin(B, cfg, rng)
    else:
        A = pocock_simon_minimization(B if Z is None else Z, cfg, rng)
    log.debug("%s randomization assigned %d of %d units to treatment", cfg.kind, A.sum(), A.shape[0])
    return A
