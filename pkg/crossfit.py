"""
Cross-fitted estimation: projection functions are fitted on the complement of
every fold and evaluated on the fold, the fold estimates are averaged.
"""

from concurrent import futures
from dataclasses import dataclass
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

import adjusters
from adjusters import AdjusterSpec, ProjectionFit
from estimators import DEFAULT_LEVEL, EffectEstimate, EstimationError, adjusted_estimate, wald_ci
from trial_data import TrialDataset

log = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
MAX_REDRAWS = 20


@dataclass(frozen=True, eq=False)
class FoldPartition:
    """
    M disjoint, sorted index sets covering 0..n-1.
    """
    M: int
    folds: Tuple[np.ndarray, ...]

    @property
    def n(self) -> int:
        return int(sum(fold.shape[0] for fold in self.folds))

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(int(fold.shape[0]) for fold in self.folds)

    def complement(self, m: int) -> np.ndarray:
        return np.sort(np.concatenate([fold for j, fold in enumerate(self.folds) if j != m]))


def _split(members: np.ndarray, M: int) -> List[np.ndarray]:
    size = members.shape[0] // M
    parts = [members[m * size:(m + 1) * size] for m in range(M - 1)]
    parts.append(members[(M - 1) * size:])
    return parts


def partition_folds(n: int, M: int, rng: np.random.Generator) -> FoldPartition:
    """
    Uniform random partition of n units into M folds; the first M-1 folds hold
    floor(n/M) units, the last one the remainder.

    :param int n: Number of units.
    :param int M: Number of folds, 2 <= M <= n.
    :param np.random.Generator rng: Random generator.
    :raises ValueError: If M is out of range.
    :return FoldPartition: The partition.
    """
    if not 2 <= M <= n:
        raise ValueError(f"Fold count {M} outside 2..{n}.")
    parts = _split(rng.permutation(n), M)
    return FoldPartition(M=M, folds=tuple(np.sort(part) for part in parts))


def partition_folds_within_strata(B: np.ndarray, M: int, rng: np.random.Generator) -> FoldPartition:
    """
    Partition each stratum separately with the size rule of `partition_folds` and
    join the m-th parts of all strata into fold m.
    """
    B = np.asarray(B)
    if not 2 <= M <= B.shape[0]:
        raise ValueError(f"Fold count {M} outside 2..{B.shape[0]}.")
    parts = [[] for _ in range(M)]
    for label in np.unique(B):
        members = np.flatnonzero(B == label)
        for m, part in enumerate(_split(members[rng.permutation(members.shape[0])], M)):
            parts[m].append(part)
    return FoldPartition(M=M, folds=tuple(np.sort(np.concatenate(part)) for part in parts))


def _empty_cells(ds: TrialDataset, partition: FoldPartition) -> List[str]:
    empty = []
    for m, fold in enumerate(partition.folds):
        B, A = ds.B[fold], ds.A[fold]
        for k in range(1, ds.K + 1):
            for arm in (0, 1):
                if not np.any((B == k) & (A == arm)):
                    empty.append(f"fold {m + 1} stratum {ds.stratum_labels[k - 1]} arm {arm}")
    return empty


def draw_partition(ds: TrialDataset, M: int, rng: np.random.Generator, within_strata: bool = False,
                   max_redraws: int = MAX_REDRAWS) -> FoldPartition:
    """
    Draw a partition in which every (fold, stratum, arm) cell holds a unit, redrawing up to `max_redraws` times.

    :raises EstimationError: If no such partition was found.
    """
    for attempt in range(max_redraws + 1):
        if within_strata:
            partition = partition_folds_within_strata(ds.B, M, rng)
        else:
            partition = partition_folds(ds.n, M, rng)
        empty = _empty_cells(ds, partition)
        if not empty:
            return partition
        if attempt < max_redraws:
            log.info("Redrawing fold partition, empty cells: %s", ", ".join(empty))
    raise EstimationError(
        f"no {M} fold partition without empty cells after {max_redraws} redraws: {', '.join(empty)}")


def fit_folds(ds: TrialDataset, spec: AdjusterSpec, partition: FoldPartition, rng: np.random.Generator,
              max_workers: Optional[int] = None) -> List[ProjectionFit]:
    """
    Fit the projection functions of every fold on its complement. The fits run in
    parallel, each with a generator seeded in advance.
    """
    seeds = rng.integers(0, 2 ** 63 - 1, size=partition.M)

    def fit_one(m):
        training = ds.subset(partition.complement(m))
        return adjusters.fit(spec, training, np.random.default_rng(int(seeds[m])))

    with futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fit_one, range(partition.M)))


def estimate_folds(ds: TrialDataset, fits: Sequence[ProjectionFit], partition: FoldPartition,
                   level: float = DEFAULT_LEVEL) -> List[EffectEstimate]:
    """
    Estimate on every fold with the functions fitted on its complement.
    """
    return [adjusted_estimate(ds.subset(fold), fit, level) for fold, fit in zip(partition.folds, fits)]


def aggregate(estimates: Sequence[EffectEstimate], n: int, level: float = DEFAULT_LEVEL,
              method: str = "crossfit") -> EffectEstimate:
    """
    Unweighted means of the fold estimates and fold variances, se = sqrt(mean variance / n).
    """
    tau = float(np.mean([est.tau_hat for est in estimates]))
    var_r = float(np.mean([est.var_r for est in estimates]))
    var_hr = float(np.mean([est.var_hr for est in estimates]))
    variance = float(np.mean([est.var_r + est.var_hr for est in estimates]))
    est = EffectEstimate(tau_hat=tau, var_r=var_r, var_hr=var_hr, n=n, se=float(np.sqrt(variance / n)),
                         method=method, metadata={"folds": len(estimates)})
    return wald_ci(est, level)


def crossfit_estimate(ds: TrialDataset, spec: AdjusterSpec, M: int = DEFAULT_FOLDS,
                      rng: Optional[np.random.Generator] = None, level: float = DEFAULT_LEVEL,
                      within_strata: bool = False, max_workers: Optional[int] = None) -> EffectEstimate:
    """
    Cross-fitted adjusted estimate.

    :param TrialDataset ds: Dataset with assignments and observed outcomes.
    :param AdjusterSpec spec: Projection function kind.
    :param int M: Number of folds.
    :param np.random.Generator rng: Random generator for the partition and the fits.
    :param float level: Confidence level.
    :param bool within_strata: Partition inside every stratum instead of over the whole sample.
    :param int max_workers: Threads used for the fold fits.
    :raises EstimationError: If no usable partition exists or a fold estimate fails.
    :return EffectEstimate: The aggregated estimate.
    """
    rng = rng if rng is not None else np.random.default_rng()
    partition = draw_partition(ds, M, rng, within_strata=within_strata)
    fits = fit_folds(ds, spec, partition, rng, max_workers=max_workers)
    estimates = estimate_folds(ds, fits, partition, level)
    method = ("~" if spec.stratum_specific else "") + spec.kind + "_ss"
    return aggregate(estimates, ds.n, level, method=method)
