"""
Data model of a randomized trial under stratified randomization.

Holds covariates, stratum labels, assignments and outcomes of the units and reads
trial datasets from CSV or Excel files using pandas.
"""

from dataclasses import dataclass, field, replace
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

POTENTIAL_OUTCOME_COLUMNS = ("Y0", "Y1")
# first line of exported files, followed by JSON with the target proportion and the stratum order
HEADER_PREFIX = "# trial "


class TrialValidationError(ValueError):
    """
    Raised if a dataset or an input file violates the trial data invariants.
    """

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ColumnRoles:
    """
    Maps file columns to their role in the trial.
    Columns not named here are used as covariates if `covariates` is None. Without
    `potential_outcomes` the columns Y0 and Y1 are read as potential outcomes when
    both are present.
    """
    outcome: str = "Y"
    arm: str = "A"
    stratum: str = "B"
    covariates: Optional[Tuple[str, ...]] = None
    potential_outcomes: Optional[Tuple[str, str]] = None


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """
    Units of a two arm trial.

    Strata are stored as dense integers 1..K, the original labels are kept in
    `stratum_labels` (position k-1 holds the label of stratum k). Arrays are
    read only after construction, so a dataset can be shared between workers.
    """
    X: np.ndarray
    B: np.ndarray
    pi_target: float
    A: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    Y0: Optional[np.ndarray] = None
    Y1: Optional[np.ndarray] = None
    K: int = 0
    stratum_labels: Tuple[Any, ...] = ()
    covariate_names: Tuple[str, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "B", np.array(self.B, dtype=np.int64))
        for name in ("A",):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.int64))
        for name in ("Y", "Y0", "Y1"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        if self.K == 0:
            object.__setattr__(self, "K", int(self.B.max()) if self.B.size else 0)
        if not self.stratum_labels:
            object.__setattr__(self, "stratum_labels", tuple(range(1, self.K + 1)))
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names",
                               tuple(f"X{j + 1}" for j in range(self.X.shape[1])))
        for name in ("X", "B", "A", "Y", "Y0", "Y1"):
            value = getattr(self, name)
            if value is not None:
                value.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.B.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def has_potential_outcomes(self) -> bool:
        return self.Y0 is not None and self.Y1 is not None

    def with_assignment(self, A: np.ndarray) -> "TrialDataset":
        """
        Attach treatment assignments and realize the observed outcomes.

        :param np.ndarray A: Assignment indicators in {0, 1}.
        :raises ValueError: If the dataset has no potential outcomes.
        :return TrialDataset: New dataset with `A` and `Y` set.
        """
        if not self.has_potential_outcomes:
            raise ValueError("Observed outcomes can only be realized from potential outcomes.")
        A = np.asarray(A, dtype=np.int64)
        Y = np.where(A == 1, self.Y1, self.Y0)
        return replace(self, A=A, Y=Y)

    def subset(self, index: np.ndarray) -> "TrialDataset":
        """
        Restrict the dataset to the units in `index`. Stratum numbering and K are kept.
        """
        index = np.asarray(index)

        def take(values):
            return None if values is None else values[index]

        return replace(self, X=self.X[index], B=self.B[index], A=take(self.A), Y=take(self.Y),
                       Y0=take(self.Y0), Y1=take(self.Y1))

    def require_valid(self) -> "TrialDataset":
        violations = validate(self)
        if violations:
            raise TrialValidationError(violations)
        return self


@dataclass(frozen=True, eq=False)
class StratumStats:
    """
    Per stratum counts. Arrays are indexed by k-1.
    """
    n: int
    n_k: np.ndarray
    n_k1: np.ndarray
    n_k0: np.ndarray
    p_nk: np.ndarray
    pi_nk: np.ndarray

    @property
    def K(self) -> int:
        return int(self.n_k.shape[0])


def stratum_stats(ds: TrialDataset) -> StratumStats:
    """
    Count units, treated and controls in every stratum.

    :param TrialDataset ds: Dataset with assignments.
    :raises ValueError: If the dataset carries no assignments.
    :return StratumStats: Stratum sizes, proportions and treated fractions.
    """
    if ds.A is None:
        raise ValueError("Stratum statistics need treatment assignments.")
    n_k = np.bincount(ds.B - 1, minlength=ds.K)[:ds.K]
    n_k1 = np.bincount(ds.B - 1, weights=ds.A, minlength=ds.K)[:ds.K].astype(np.int64)
    n_k0 = n_k - n_k1
    with np.errstate(invalid="ignore", divide="ignore"):
        pi_nk = n_k1 / n_k
    return StratumStats(n=ds.n, n_k=n_k, n_k1=n_k1, n_k0=n_k0, p_nk=n_k / ds.n, pi_nk=pi_nk)


def validate(ds: TrialDataset) -> List[str]:
    """
    Check the dataset invariants.

    Every entry of the result names the violated invariant and, where it applies,
    the offending (zero based) unit index.

    :param TrialDataset ds: Dataset to check.
    :return list: Violation descriptions, empty if the dataset is consistent.
    """
    violations = []
    n = ds.n
    if ds.X.shape[0] != n:
        violations.append(f"covariate matrix has {ds.X.shape[0]} rows for {n} units")
    for name in ("A", "Y", "Y0", "Y1"):
        values = getattr(ds, name)
        if values is not None and values.shape[0] != n:
            violations.append(f"{name} has {values.shape[0]} entries for {n} units")
    if violations:
        return violations

    if not 0.0 < ds.pi_target < 1.0:
        violations.append(f"target proportion {ds.pi_target} outside (0, 1)")

    bad_labels = np.flatnonzero((ds.B < 1) | (ds.B > ds.K))
    for index in bad_labels:
        violations.append(f"stratum label {ds.B[index]} outside 1..{ds.K} at index {index}")
    present = np.bincount(ds.B[(ds.B >= 1) & (ds.B <= ds.K)] - 1, minlength=ds.K)
    for k in np.flatnonzero(present == 0):
        violations.append(f"empty stratum {k + 1}")

    if ds.A is not None:
        for index in np.flatnonzero((ds.A != 0) & (ds.A != 1)):
            violations.append(f"non-binary assignment {ds.A[index]} at index {index}")

    non_finite = np.flatnonzero(~np.isfinite(ds.X).all(axis=1))
    for index in non_finite:
        violations.append(f"non-finite covariate at index {index}")

    if ds.A is not None and ds.Y is not None and ds.has_potential_outcomes:
        expected = ds.A * ds.Y1 + (1 - ds.A) * ds.Y0
        for index in np.flatnonzero(ds.Y != expected):
            violations.append(
                f"observed outcome differs from A*Y1+(1-A)*Y0 at index {index}")
    return violations


def _normalize_strata(labels: pd.Series, levels: Optional[Sequence[Any]]) -> Tuple[np.ndarray, Tuple[Any, ...]]:
    if levels is None:
        present = labels.unique().tolist()
        try:
            levels = sorted(present)
        except TypeError:
            levels = sorted(present, key=str)
    else:
        levels = list(levels)
        unknown = sorted(set(labels.unique().tolist()) - set(levels), key=str)
        if unknown:
            raise TrialValidationError([f"unknown stratum label {label}" for label in unknown])
    dense = {label: k + 1 for k, label in enumerate(levels)}
    return labels.map(dense).to_numpy(dtype=np.int64), tuple(levels)


def _numeric_column(frame: pd.DataFrame, column: str, kind: str) -> Tuple[np.ndarray, List[str]]:
    parsed = pd.to_numeric(frame[column], errors="coerce")
    bad = np.flatnonzero(parsed.isna().to_numpy())
    return parsed.to_numpy(dtype=np.float64), [
        f"non-numeric {kind} cell in column '{column}' at row {index}: '{frame[column].iloc[index]}'"
        for index in bad]


def from_frame(frame: pd.DataFrame, roles: ColumnRoles, pi_target: Optional[float] = None,
               stratum_levels: Optional[Sequence[Any]] = None) -> TrialDataset:
    """
    Build a validated dataset from a data frame.

    :param pd.DataFrame frame: Raw table, one row per unit.
    :param ColumnRoles roles: Column roles.
    :param float pi_target: Target treated proportion, defaults to n1/n.
    :param list stratum_levels: Declared stratum labels. Labels declared but absent are reported as empty strata.
    :raises TrialValidationError: For missing columns, non-binary assignments,
        non-numeric cells and empty strata.
    :return TrialDataset: The dataset.
    """
    if roles.potential_outcomes is None and all(c in frame.columns for c in POTENTIAL_OUTCOME_COLUMNS):
        roles = replace(roles, potential_outcomes=POTENTIAL_OUTCOME_COLUMNS)
    required = [roles.outcome, roles.arm, roles.stratum]
    if roles.potential_outcomes is not None:
        required.extend(roles.potential_outcomes)
    if roles.covariates is not None:
        required.extend(roles.covariates)
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise TrialValidationError([f"missing column '{column}'" for column in missing])

    violations = []
    arm_text = frame[roles.arm].astype(str).str.strip()
    arm_numeric = pd.to_numeric(arm_text, errors="coerce")
    non_binary = np.flatnonzero(~arm_numeric.isin([0, 1]).to_numpy())
    violations.extend(f"non-binary assignment at row {index}: '{arm_text.iloc[index]}'"
                      for index in non_binary)
    if frame[roles.stratum].isna().any():
        violations.extend(f"missing stratum label at row {index}"
                          for index in np.flatnonzero(frame[roles.stratum].isna().to_numpy()))

    Y, bad = _numeric_column(frame, roles.outcome, "outcome")
    violations.extend(bad)

    reserved = set(required[:3])
    if roles.potential_outcomes is not None:
        reserved.update(roles.potential_outcomes)
    covariates = list(roles.covariates) if roles.covariates is not None else [
        column for column in frame.columns if column not in reserved]
    X = np.empty((len(frame), len(covariates)), dtype=np.float64)
    for j, column in enumerate(covariates):
        X[:, j], bad = _numeric_column(frame, column, "covariate")
        violations.extend(bad)

    Y0 = Y1 = None
    if roles.potential_outcomes is not None:
        Y0, bad = _numeric_column(frame, roles.potential_outcomes[0], "outcome")
        violations.extend(bad)
        Y1, bad = _numeric_column(frame, roles.potential_outcomes[1], "outcome")
        violations.extend(bad)
    if violations:
        raise TrialValidationError(violations)

    B, labels = _normalize_strata(frame[roles.stratum], stratum_levels)
    A = arm_numeric.to_numpy().astype(np.int64)
    if pi_target is None:
        pi_target = float(A.mean())
    ds = TrialDataset(X=X, B=B, A=A, Y=Y, Y0=Y0, Y1=Y1, pi_target=pi_target, K=len(labels),
                      stratum_labels=labels, covariate_names=tuple(str(c) for c in covariates))
    log.debug("Loaded %d units, %d strata, %d covariates", ds.n, ds.K, ds.p)
    return ds.require_valid()


def _read_header(path: Path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as file:
        first = file.readline()
    if not first.startswith(HEADER_PREFIX):
        return {}
    try:
        header = json.loads(first[len(HEADER_PREFIX):])
    except json.JSONDecodeError as exc:
        raise TrialValidationError([f'malformed header line in "{path}": {exc}']) from exc
    if not isinstance(header, dict):
        raise TrialValidationError([f'malformed header line in "{path}"'])
    return header


def _plain(label: Any) -> Any:
    return label.item() if isinstance(label, np.generic) else label


def load_csv(path, roles: ColumnRoles = ColumnRoles(), pi_target: Optional[float] = None,
             stratum_levels: Optional[Sequence[Any]] = None) -> TrialDataset:
    """
    Read a trial dataset from a UTF-8 CSV file with a header row.

    A leading `# trial {...}` line as written by `write_csv` supplies the target
    proportion and the stratum order unless they are passed explicitly.

    :param path: File path.
    :param ColumnRoles roles: Column roles.
    :param float pi_target: Target treated proportion, defaults to the file header, else n1/n.
    :raises TrialValidationError: If the file content violates the dataset invariants.
    :return TrialDataset: The validated dataset.
    """
    path = Path(path)
    if not path.is_file():
        raise TrialValidationError([f'file "{path}" not accessible'])
    header = _read_header(path)
    if pi_target is None:
        pi_target = header.get("pi_target")
    if stratum_levels is None:
        stratum_levels = header.get("strata")
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip", skiprows=1 if header else 0)
    return from_frame(frame, roles, pi_target, stratum_levels)


def load_excel(path, roles: ColumnRoles = ColumnRoles(), sheet: Any = 0,
               pi_target: Optional[float] = None,
               stratum_levels: Optional[Sequence[Any]] = None) -> TrialDataset:
    """
    Read a trial dataset from a sheet of an Excel workbook (xlsx via openpyxl, xls via xlrd).
    """
    path = Path(path)
    if not path.is_file():
        raise TrialValidationError([f'file "{path}" not accessible'])
    with pd.ExcelFile(path) as workbook:
        frame = pd.read_excel(workbook, sheet_name=sheet)
    return from_frame(frame, roles, pi_target, stratum_levels)


def load_table(path, roles: ColumnRoles = ColumnRoles(), pi_target: Optional[float] = None) -> TrialDataset:
    """
    Dispatch on the file suffix to `load_excel` or `load_csv`.
    """
    if Path(path).suffix.lower() in (".xlsx", ".xls", ".xlsm"):
        return load_excel(path, roles, pi_target=pi_target)
    return load_csv(path, roles, pi_target=pi_target)


def to_frame(ds: TrialDataset, roles: ColumnRoles = ColumnRoles()) -> pd.DataFrame:
    frame = pd.DataFrame(ds.X, columns=list(ds.covariate_names))
    frame[roles.stratum] = [ds.stratum_labels[k - 1] for k in ds.B]
    if ds.A is not None:
        frame[roles.arm] = ds.A
    if ds.Y is not None:
        frame[roles.outcome] = ds.Y
    if ds.has_potential_outcomes:
        names = roles.potential_outcomes or POTENTIAL_OUTCOME_COLUMNS
        frame[names[0]] = ds.Y0
        frame[names[1]] = ds.Y1
    return frame


def write_csv(ds: TrialDataset, path, roles: ColumnRoles = ColumnRoles()):
    """
    Export a dataset so that `load_csv` restores every field bit for bit. The first
    line records the target proportion and the stratum order.
    """
    header = {"pi_target": float(ds.pi_target), "strata": [_plain(label) for label in ds.stratum_labels]}
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(HEADER_PREFIX + json.dumps(header) + "\n")
        to_frame(ds, roles).to_csv(file, index=False, lineterminator="\n")
