"""
Monte Carlo scenarios: configuration, seeded replications, summary statistics,
result tables and the analysis of a single trial file.
"""

import configparser
from dataclasses import dataclass, field, replace
from functools import lru_cache
import io
import itertools
import logging
from pathlib import Path
import time
from typing import Any, Dict, List, Optional, Sequence

from joblib import Parallel, delayed
import numpy as np
import pandas as pd

import adjusters
from adjusters import AdjusterSpec
import crossfit
from crossfit import DEFAULT_FOLDS
from datagen import ModelSpec, generate, true_ate
from estimators import DEFAULT_LEVEL, EffectEstimate, EstimationError, adjusted_estimate
from randomizers import RandomizerConfig, randomize
import trial_data
from trial_data import ColumnRoles

log = logging.getLogger(__name__)

DEFAULT_REPLICATIONS = 500
DEFAULT_SEED = 20240601
DEFAULT_TRUTH_DRAWS = 10 ** 6
TRUTH_SEED = 4242

ESTIMATOR_LABELS = {
    "zero": "naive",
    "ols": "linear",
    "lasso": "lasso",
    "local_linear_kernel": "kernel",
    "natural_spline": "nspline",
    "cart": "rpart",
    "random_forest": "rf",
    "gbrt": "gbrt",
    "mlp": "nnet",
    "oracle": "oracle",
}

TABLE_COLUMNS = ["Model", "Estimator", "Randomizer", "Bias", "SD", "SE", "CP"]
STATISTICS = ["Bias", "SD", "SE", "CP"]


class ReplicationError(RuntimeError):
    """
    A component failed inside one replication.
    """

    def __init__(self, replication: int, message: str):
        super().__init__(replication, message)
        self.replication = replication

    def __str__(self):
        return f"replication {self.args[0]}: {self.args[1]}"


def estimator_label(spec: AdjusterSpec, cross_fitted: bool = False) -> str:
    """
    Short estimator name, `~` marks stratum specific and `_ss` cross-fitted adjustment.
    """
    prefix = "~" if spec.stratum_specific else ""
    suffix = "_ss" if cross_fitted else ""
    return f"{prefix}{ESTIMATOR_LABELS[spec.kind]}{suffix}"


@dataclass(frozen=True)
class ScenarioConfig:
    """
    One simulation cell: model, randomizer and estimator with the replication settings.
    """
    name: str = "scenario"
    model: int = 1
    n: int = 1000
    p: Optional[int] = None
    pi_target: float = 0.5
    randomizer: RandomizerConfig = field(default_factory=RandomizerConfig)
    adjuster: AdjusterSpec = field(default_factory=AdjusterSpec)
    crossfit: bool = False
    folds: int = DEFAULT_FOLDS
    within_strata: bool = False
    replications: int = DEFAULT_REPLICATIONS
    level: float = DEFAULT_LEVEL
    seed: int = DEFAULT_SEED
    truth_draws: int = DEFAULT_TRUTH_DRAWS

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError(f"At least one replication is needed, got {self.replications}.")
        if self.crossfit and not 2 <= self.folds <= self.n:
            raise ValueError(f"Fold count {self.folds} outside 2..{self.n}.")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"Confidence level {self.level} outside (0, 1).")
        if self.randomizer.pi_target != self.pi_target:
            raise ValueError(f"Randomizer targets pi={self.randomizer.pi_target}, scenario pi={self.pi_target}.")
        ModelSpec(model_id=self.model, n=self.n, p=self.p)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(model_id=self.model, n=self.n, p=self.p)

    @property
    def estimator(self) -> str:
        return estimator_label(self.adjuster, self.crossfit)


@dataclass(frozen=True)
class SimulationSummary:
    """
    Bias, SD and mean SE of the estimates and the coverage of their intervals.
    """
    bias: float
    sd: float
    se: float
    cp: float
    replications: int
    tau_true: float
    model: int = 0
    estimator: str = ""
    randomizer: str = ""
    name: str = ""
    runtime: float = 0.0


@lru_cache(maxsize=None)
def scenario_truth(model: int, draws: int = DEFAULT_TRUTH_DRAWS) -> float:
    """
    True effect used for coverage, closed form where available, else a seeded Monte Carlo value.
    """
    spec = ModelSpec(model_id=model)
    if spec.base_model == 1:
        return true_ate(spec).tau
    return true_ate(spec, method="monte_carlo", draws=draws, rng=np.random.default_rng(TRUTH_SEED)).tau


def run_replication(cfg: ScenarioConfig, replication: int, seed: np.random.SeedSequence) -> EffectEstimate:
    """
    Generate, randomize, adjust and estimate once.

    :raises ReplicationError: If any step fails, annotated with the replication index.
    """
    try:
        rng = np.random.default_rng(seed)
        ds = generate(cfg.model_spec, rng, pi_target=cfg.pi_target)
        ds = ds.with_assignment(randomize(cfg.randomizer, ds.B, rng))
        if cfg.crossfit:
            return crossfit.crossfit_estimate(ds, cfg.adjuster, cfg.folds, rng, cfg.level,
                                             within_strata=cfg.within_strata)
        return adjusted_estimate(ds, adjusters.fit(cfg.adjuster, ds, rng), cfg.level)
    except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
        raise ReplicationError(replication, str(exc)) from exc


def summarize(estimates: Sequence[EffectEstimate], tau_true: float, **labels) -> SimulationSummary:
    """
    Bias = mean(tau_hat) - tau, SD with divisor R-1, SE = mean(se), CP = share of covering intervals.

    :param list estimates: At least one estimate.
    :param float tau_true: True effect.
    :raises ValueError: If no estimate is given.
    :return SimulationSummary: The summary, SD is NaN for a single estimate.
    """
    if not estimates:
        raise ValueError("Nothing to summarize.")
    tau_hat = np.array([est.tau_hat for est in estimates])
    if tau_hat.shape[0] > 1:
        sd = float(np.std(tau_hat, ddof=1))
    else:
        log.warning("Standard deviation of a single replication is undefined")
        sd = float("nan")
    return SimulationSummary(
        bias=float(tau_hat.mean() - tau_true),
        sd=sd,
        se=float(np.mean([est.se for est in estimates])),
        cp=float(np.mean([est.covers(tau_true) for est in estimates])),
        replications=int(tau_hat.shape[0]),
        tau_true=float(tau_true),
        **labels)


def run_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> SimulationSummary:
    """
    Run all replications of a scenario, each with its own generator spawned from the base seed.

    :param ScenarioConfig cfg: Scenario.
    :param int n_jobs: joblib workers, results are kept in replication order.
    :raises ReplicationError: If a replication fails.
    :return SimulationSummary: The summary.
    """
    started = time.perf_counter()
    log.info("Scenario %s: model %d, %s, %s, %d replications", cfg.name, cfg.model, cfg.randomizer.kind,
             cfg.estimator, cfg.replications)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    estimates = Parallel(n_jobs=n_jobs)(
        delayed(run_replication)(cfg, r, seed) for r, seed in enumerate(seeds))
    tau_true = scenario_truth(cfg.model, cfg.truth_draws)
    summary = summarize(estimates, tau_true, model=cfg.model, estimator=cfg.estimator,
                        randomizer=cfg.randomizer.kind, name=cfg.name)
    runtime = time.perf_counter() - started
    log.info("Scenario %s done in %.1f s: bias %.3f sd %.3f se %.3f cp %.3f", cfg.name, runtime,
             summary.bias, summary.sd, summary.se, summary.cp)
    return replace(summary, runtime=runtime)


def _table_frame(summaries: Sequence[SimulationSummary]) -> pd.DataFrame:
    rows = [[s.model, s.estimator, s.randomizer, s.bias, s.sd, s.se, s.cp] for s in summaries]
    frame = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    frame[STATISTICS] = frame[STATISTICS].astype(float).round(2)
    return frame


def _wide_frame(frame: pd.DataFrame) -> pd.DataFrame:
    randomizers = list(dict.fromkeys(frame["Randomizer"]))
    keys = list(dict.fromkeys(zip(frame["Model"], frame["Estimator"])))
    columns = ["Model", "Estimator"] + [f"{r} {stat}" for r in randomizers for stat in STATISTICS]
    lookup = {(row.Model, row.Estimator, row.Randomizer): row for row in frame.itertuples(index=False)}
    rows = []
    for model, estimator in keys:
        row = [model, estimator]
        for randomizer in randomizers:
            found = lookup.get((model, estimator, randomizer))
            row.extend(getattr(found, stat) if found is not None else float("nan") for stat in STATISTICS)
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def _markdown(frame: pd.DataFrame) -> str:
    def cell(value):
        if isinstance(value, float):
            return "" if np.isnan(value) else f"{value:.2f}"
        return str(value)

    lines = ["| " + " | ".join(str(c) for c in frame.columns) + " |",
             "|" + "|".join("---" for _ in frame.columns) + "|"]
    lines.extend("| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(index=False))
    return "\n".join(lines) + "\n"


def emit_table(summaries: Sequence[SimulationSummary], fmt: str = "csv", layout: str = "long") -> str:
    """
    Render summaries with two decimals.

    The long layout has the columns Model, Estimator, Randomizer, Bias, SD, SE, CP.
    The wide layout has one row per model and estimator and a Bias/SD/SE/CP column group per randomizer.

    :param list summaries: At least one summary.
    :param str fmt: `csv` or `markdown`.
    :param str layout: `long` or `wide`.
    :raises ValueError: For no summaries or an unknown format or layout.
    :return str: The rendered table.
    """
    if not summaries:
        raise ValueError("No summaries to render.")
    if layout not in ("long", "wide"):
        raise ValueError(f"Unknown table layout '{layout}'.")
    frame = _table_frame(summaries)
    if layout == "wide":
        frame = _wide_frame(frame)
    if fmt == "csv":
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, float_format="%.2f", lineterminator="\n")
        return buffer.getvalue()
    if fmt == "markdown":
        return _markdown(frame)
    raise ValueError(f"Unknown table format '{fmt}'.")


_SCENARIO_KEYS = {"model", "n", "p", "pi", "randomizer", "block_size", "coin_prob", "weights", "adjuster",
                  "stratum_specific", "crossfit", "folds", "within_strata", "replications", "level", "seed",
                  "truth_draws"}


def _as_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Not a boolean: '{text}'.")


def _choices(section: configparser.SectionProxy, key: str, default: str) -> List[str]:
    return [item.strip() for item in section.get(key, default).split(",") if item.strip()]


def scenarios_from_section(name: str, section: configparser.SectionProxy) -> List[ScenarioConfig]:
    """
    Expand one config section into scenarios. Comma separated `randomizer`,
    `adjuster` and `stratum_specific` values form a cross product.
    """
    keys = set(section.keys())
    unknown = sorted(key for key in keys if key not in _SCENARIO_KEYS and not key.startswith("adjuster."))
    if unknown:
        raise ValueError(f"Section [{name}]: unknown keys {unknown}.")
    model = section.getint("model", 1)
    n = section.getint("n", 1000)
    p = section.getint("p") if section.get("p", "").strip() else None
    pi = section.getfloat("pi", 0.5)
    model_spec = ModelSpec(model_id=model, n=n, p=p)
    overrides = {key.split(".", 1)[1]: section[key] for key in keys if key.startswith("adjuster.")}
    weights = section.get("weights", "").strip()
    common = dict(
        model=model, n=n, p=p, pi_target=pi,
        crossfit=section.getboolean("crossfit", False),
        folds=section.getint("folds", DEFAULT_FOLDS),
        within_strata=section.getboolean("within_strata", False),
        replications=section.getint("replications", DEFAULT_REPLICATIONS),
        level=section.getfloat("level", DEFAULT_LEVEL),
        seed=section.getint("seed", DEFAULT_SEED),
        truth_draws=section.getint("truth_draws", DEFAULT_TRUTH_DRAWS))

    scenarios = []
    grid = itertools.product(_choices(section, "randomizer", "simple"), _choices(section, "adjuster", "zero"),
                             _choices(section, "stratum_specific", "false"))
    for randomizer, kind, stratum_specific in grid:
        randomizer_cfg = RandomizerConfig(
            kind=randomizer, pi_target=pi,
            block_size=section.getint("block_size", 6),
            coin_prob=section.getfloat("coin_prob", 0.75),
            weights=tuple(float(w) for w in weights.split(",")) if weights else None)
        kind_overrides = {key: value for key, value in overrides.items()
                          if key in adjusters.DEFAULT_PARAMS.get(kind, {})}
        spec = AdjusterSpec.from_strings(kind, _as_bool(stratum_specific), kind_overrides,
                                         model=model_spec if kind == "oracle" else None)
        cfg = ScenarioConfig(name=name, randomizer=randomizer_cfg, adjuster=spec, **common)
        scenarios.append(replace(cfg, name=f"{name}/{randomizer}/{cfg.estimator}"))
    return scenarios


def load_config(path) -> List[ScenarioConfig]:
    """
    Read scenarios from an INI file, one section per scenario grid, shared keys in [DEFAULT].

    :param path: Config file path.
    :raises ValueError: If the file is missing or holds invalid settings.
    :return list: The scenarios in file order.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f'Config file "{path}" not accessible.')
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    scenarios = []
    for name in parser.sections():
        scenarios.extend(scenarios_from_section(name, parser[name]))
    if not scenarios:
        raise ValueError(f'Config file "{path}" defines no scenario.')
    return scenarios


@dataclass(frozen=True)
class AnalysisReport:
    """
    Estimate for one trial file with the fitted adjuster diagnostics.
    """
    estimate: EffectEstimate
    estimator: str
    n: int
    K: int
    p: int
    diagnostics: Dict[Any, Any] = field(default_factory=dict)

    def render(self) -> str:
        est = self.estimate
        lines = [
            f"estimator: {self.estimator}",
            f"units: {self.n}  strata: {self.K}  covariates: {self.p}",
            f"tau_hat: {est.tau_hat:.6f}",
            f"se: {est.se:.6f}",
            f"{est.ci_level:.0%} CI: [{est.ci_low:.6f}, {est.ci_high:.6f}]",
            f"var_r: {est.var_r:.6f}  var_hr: {est.var_hr:.6f}",
        ]
        for (arm, k), diag in sorted(self.diagnostics.items()):
            cell = "pooled" if k == 0 else f"stratum {k}"
            lines.append(f"arm {arm} {cell}: m={diag.m} mse={diag.mse:.6g} size={diag.size}")
        return "\n".join(lines) + "\n"


def analyze(path, spec: AdjusterSpec, folds: Optional[int] = None, pi_target: Optional[float] = None,
            level: float = DEFAULT_LEVEL, seed: int = DEFAULT_SEED,
            roles: ColumnRoles = ColumnRoles(), within_strata: bool = False) -> AnalysisReport:
    """
    Estimate the effect in a CSV or Excel trial file.

    :param path: Trial file.
    :param AdjusterSpec spec: Adjuster.
    :param int folds: Cross-fit with this many folds, None for the plug-in estimate.
    :param float pi_target: Target treated proportion, defaults to the observed share.
    :param float level: Confidence level.
    :param int seed: Seed of fits and fold partition.
    :param ColumnRoles roles: Column roles of the file.
    :param bool within_strata: Draw the folds inside every stratum.
    :raises TrialValidationError: If the file is invalid.
    :raises EstimationError: If the estimate cannot be formed.
    :return AnalysisReport: The report.
    """
    ds = trial_data.load_table(path, roles, pi_target=pi_target)
    rng = np.random.default_rng(seed)
    if folds is not None:
        est = crossfit.crossfit_estimate(ds, spec, folds, rng, level, within_strata=within_strata)
        return AnalysisReport(estimate=est, estimator=estimator_label(spec, True), n=ds.n, K=ds.K, p=ds.p)
    projection = adjusters.fit(spec, ds, rng)
    est = adjusted_estimate(ds, projection, level)
    return AnalysisReport(estimate=est, estimator=estimator_label(spec), n=ds.n, K=ds.K, p=ds.p,
                          diagnostics=dict(projection.diagnostics))
