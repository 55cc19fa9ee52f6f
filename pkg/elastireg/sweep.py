"""Grid search over (lambda_a, mu_a) and heuristic selection of the optimum.

Each grid combination is registered with an engine (amortized forward pass or
instance optimization), evaluated, aggregated over cases, and ranked by one or
more heuristics. Reports are written as JSON and a flat CSV for heatmaps.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .amortizer import HyperNet, predict_field
from .energy import (
    DEFAULT_NCC_WINDOW,
    ELASTICITY_PRESETS,
    AlphaWeighting,
    ElasticityParams,
    RawElasticity,
    composite_loss_eq5,
)
from .exceptions import EvaluationError, ParameterError
from .grid import DisplacementField
from .metrics import EvalCase, MetricsReport, evaluate_field
from .registration import OptimizerConfig, register_pair

logger = logging.getLogger(__name__)

GRID_CSV_HEADER = ["lambda", "mu", "dice_mean", "tre_mean_mm", "neg_jac_fraction"]
ALPHA_CSV_HEADER = ["regularizer", "alpha", "dice_mean", "tre_mean_mm", "neg_jac_fraction"]
METRIC_KEYS = ("dice_mean", "tre_mean_mm", "neg_jac_fraction")
REFINE_DIVISOR = 5

Combo = tuple[float, float]


class ParamGrid(BaseModel):
    """Feasible (lambda_a, mu_a) lattice points, sorted lexicographically."""

    model_config = ConfigDict(frozen=True)

    resolution: float
    combos: tuple[Combo, ...]

    def __len__(self) -> int:
        return len(self.combos)


def _lattice_size(resolution: float) -> int:
    if not 0.0 < resolution <= 1.0:
        msg = f"Grid resolution must lie in (0, 1], got {resolution}"
        raise ParameterError(msg)
    n = round(1.0 / resolution)
    if abs(n * resolution - 1.0) > 1e-9:
        msg = f"Grid resolution {resolution} does not divide 1"
        raise ParameterError(msg)
    return n


def enumerate_grid(resolution: float = 0.1) -> ParamGrid:
    """All multiples of ``resolution`` with lambda_a + mu_a <= 1."""
    n = _lattice_size(resolution)
    combos = tuple((i / n, j / n) for i in range(n + 1) for j in range(n + 1 - i))
    return ParamGrid(resolution=resolution, combos=combos)


def refine_grid(center: Combo, resolution: float) -> ParamGrid:
    """Second-pass lattice at resolution/5 within +-resolution of ``center``."""
    if resolution <= 0:
        msg = f"Grid resolution must be positive, got {resolution}"
        raise ParameterError(msg)
    step = resolution / REFINE_DIVISOR
    offsets = [k * step for k in range(-REFINE_DIVISOR, REFINE_DIVISOR + 1)]
    points = set()
    for dl in offsets:
        for dm in offsets:
            lam = round(center[0] + dl, 12)
            mu = round(center[1] + dm, 12)
            if lam >= 0 and mu >= 0 and lam + mu <= 1.0 + 1e-9:
                points.add((lam + 0.0, mu + 0.0))
    return ParamGrid(resolution=step, combos=tuple(sorted(points)))


class Heuristic(BaseModel):
    """Score to maximize: w_dice * dice - w_tre * tre - w_fold * neg_jac_fraction."""

    model_config = ConfigDict(frozen=True)

    name: str
    dice_weight: float = 0.0
    tre_weight: float = 0.0
    neg_jac_weight: float = 0.0

    @model_validator(mode="after")
    def _check_weights(self) -> Heuristic:
        weights = (self.dice_weight, self.tre_weight, self.neg_jac_weight)
        if not all(math.isfinite(w) for w in weights):
            msg = f"Heuristic weights must be finite, got {weights}"
            raise ValueError(msg)
        if not any(weights):
            msg = "Heuristic needs at least one nonzero weight"
            raise ValueError(msg)
        return self

    @property
    def required(self) -> list[str]:
        needed = []
        if self.dice_weight:
            needed.append("dice_mean")
        if self.tre_weight:
            needed.append("tre_mean_mm")
        return needed

    def score(self, report: MetricsReport) -> float:
        for key in self.required:
            if getattr(report, key) is None:
                msg = f"Heuristic '{self.name}' needs {key}, which the report lacks"
                raise EvaluationError(msg)
        score = 0.0
        if self.dice_weight:
            score += self.dice_weight * report.dice_mean
        if self.tre_weight:
            score -= self.tre_weight * report.tre_mean_mm
        if self.neg_jac_weight:
            score -= self.neg_jac_weight * report.neg_jac_fraction
        return score


HEURISTIC_REGISTRY: dict[str, Heuristic] = {}


def register_heuristic(heuristic: Heuristic) -> Heuristic:
    if heuristic.name in HEURISTIC_REGISTRY:
        msg = f"Cannot register duplicate heuristic ({heuristic.name})"
        raise ParameterError(msg)
    HEURISTIC_REGISTRY[heuristic.name] = heuristic
    return heuristic


register_heuristic(Heuristic(name="max_dice", dice_weight=1.0))
register_heuristic(Heuristic(name="min_tre", tre_weight=1.0))
register_heuristic(Heuristic(name="min_folding", neg_jac_weight=1.0))


def parse_heuristic(text: str) -> Heuristic:
    """Resolve a registered name or ``weighted:<dice>,<tre>,<neg_jac>``."""
    if text in HEURISTIC_REGISTRY:
        return HEURISTIC_REGISTRY[text]
    if text.startswith("weighted:"):
        try:
            dice_w, tre_w, fold_w = (float(v) for v in text.split(":", 1)[1].split(","))
            return Heuristic(
                name=text, dice_weight=dice_w, tre_weight=tre_w, neg_jac_weight=fold_w
            )
        except ValueError as e:
            msg = f"Invalid weighted heuristic '{text}': {e}"
            raise ParameterError(msg) from e
    known = ", ".join(sorted(HEURISTIC_REGISTRY))
    msg = f"Unknown heuristic '{text}' (known: {known}, or weighted:<dice>,<tre>,<neg_jac>)"
    raise ParameterError(msg)


class SweepRecord(BaseModel):
    lambda_a: float
    mu_a: float
    case: str
    loss: float
    metrics: MetricsReport


class AggregateRecord(BaseModel):
    """Mean and population std of each metric over cases for one combo."""

    lambda_a: float
    mu_a: float
    cases: int
    loss_mean: float | None = None
    metrics: MetricsReport
    std: dict[str, float | None] = Field(default_factory=dict)

    @property
    def combo(self) -> Combo:
        return (self.lambda_a, self.mu_a)


class Selection(BaseModel):
    lambda_a: float
    mu_a: float
    score: float
    metrics: MetricsReport


class SweepReport(BaseModel):
    resolution: float | None = None
    engine: str = ""
    records: list[SweepRecord] = Field(default_factory=list)
    aggregates: list[AggregateRecord] = Field(default_factory=list)
    selected: dict[str, Selection] = Field(default_factory=dict)


def _mean_std(values: list[float | None]) -> tuple[float | None, float | None]:
    if not values or any(v is None for v in values):
        return None, None
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


def _summarize(
    metrics: Sequence[MetricsReport],
) -> tuple[MetricsReport, dict[str, float | None]]:
    """Mean metrics over cases and the population std of each metric."""
    means: dict[str, float | None] = {}
    spreads: dict[str, float | None] = {}
    for key in METRIC_KEYS:
        means[key], spreads[key] = _mean_std([getattr(m, key) for m in metrics])
    mean_report = MetricsReport(
        dice_mean=means["dice_mean"],
        tre_mean_mm=means["tre_mean_mm"],
        tre_std_mm=_mean_std([m.tre_std_mm for m in metrics])[0],
        neg_jac_fraction=means["neg_jac_fraction"],
    )
    return mean_report, spreads


def aggregate(records: Sequence[SweepRecord]) -> AggregateRecord:
    """Unweighted mean over cases of one combo's records."""
    if not records:
        msg = "Cannot aggregate an empty record set"
        raise EvaluationError(msg)
    metrics, spreads = _summarize([r.metrics for r in records])
    return AggregateRecord(
        lambda_a=records[0].lambda_a,
        mu_a=records[0].mu_a,
        cases=len(records),
        loss_mean=float(np.mean([r.loss for r in records])),
        metrics=metrics,
        std=spreads,
    )


class RegistrationEngine(Protocol):
    name: str

    def register(
        self, case: EvalCase, params: ElasticityParams
    ) -> tuple[DisplacementField, float]: ...


class InstanceEngine:
    """Per-combo instance optimization of the absorbed-weight loss."""

    name = "instance"

    def __init__(self, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()

    def register(
        self, case: EvalCase, params: ElasticityParams
    ) -> tuple[DisplacementField, float]:
        result = register_pair(case.fixed, case.moving, params, self.config)
        return result.field, result.final_terms.loss


class AmortizedEngine:
    """One hypernetwork forward pass per combo."""

    name = "amortized"

    def __init__(self, hyper: HyperNet, window: int = DEFAULT_NCC_WINDOW):
        self.hyper = hyper
        self.window = window

    def register(
        self, case: EvalCase, params: ElasticityParams
    ) -> tuple[DisplacementField, float]:
        field = predict_field(self.hyper, params, case.domain)
        loss = composite_loss_eq5(case.fixed, case.moving, field, params, self.window)
        return field, loss.value


def _check_eval_data(cases: Sequence[EvalCase], heuristics: Sequence[Heuristic]) -> None:
    for heuristic in heuristics:
        for case in cases:
            if heuristic.dice_weight and not case.has_labels:
                msg = f"Heuristic '{heuristic.name}' needs labels; case '{case.name}' has none"
                raise EvaluationError(msg)
            if heuristic.tre_weight and not case.has_keypoints:
                msg = f"Heuristic '{heuristic.name}' needs keypoints; case '{case.name}' has none"
                raise EvaluationError(msg)


def _fan_out(task: Callable, items: list, jobs: int) -> list:
    """Map ``task`` over ``items`` on up to ``jobs`` threads, keeping input order."""
    if jobs <= 1 or len(items) <= 1:
        return [task(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(task, items))


def run_sweep(
    cases: Sequence[EvalCase],
    grid: ParamGrid,
    engine: RegistrationEngine,
    heuristics: Sequence[Heuristic] = (),
    jobs: int = 1,
) -> SweepReport:
    """Register and evaluate every (combo, case); aggregate and select per heuristic."""
    if not cases:
        msg = "Sweep needs at least one case"
        raise EvaluationError(msg)
    _check_eval_data(cases, heuristics)

    def run_one(task: tuple[Combo, EvalCase]) -> SweepRecord:
        (lam, mu), case = task
        params = ElasticityParams(lambda_a=lam, mu_a=mu)
        field, loss = engine.register(case, params)
        metrics = evaluate_field(field, case)
        logger.debug("combo (%.3f, %.3f) case %s: loss %.6f", lam, mu, case.name, loss)
        return SweepRecord(lambda_a=lam, mu_a=mu, case=case.name, loss=loss, metrics=metrics)

    tasks = [(combo, case) for combo in grid.combos for case in cases]
    logger.info(
        "Sweeping %d combos x %d cases with the %s engine (jobs=%d)",
        len(grid),
        len(cases),
        engine.name,
        jobs,
    )
    records = _fan_out(run_one, tasks, jobs)
    per_combo = len(cases)
    aggregates = [
        aggregate(records[k : k + per_combo]) for k in range(0, len(records), per_combo)
    ]
    report = SweepReport(
        resolution=grid.resolution, engine=engine.name, records=records, aggregates=aggregates
    )
    for heuristic in heuristics:
        combo, metrics = select_optimum(report, heuristic)
        report.selected[heuristic.name] = Selection(
            lambda_a=combo[0], mu_a=combo[1], score=heuristic.score(metrics), metrics=metrics
        )
    return report


def select_optimum(report: SweepReport, heuristic: Heuristic) -> tuple[Combo, MetricsReport]:
    """Best-scoring combo; ties go to larger lambda_a + mu_a, then larger mu_a."""
    if not report.aggregates:
        msg = "Cannot select an optimum from an empty report"
        raise EvaluationError(msg)
    best = max(
        report.aggregates,
        key=lambda a: (heuristic.score(a.metrics), round(a.lambda_a + a.mu_a, 9), a.mu_a),
    )
    return best.combo, best.metrics


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def grid_csv(report: SweepReport) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(GRID_CSV_HEADER)
    for record in report.aggregates:
        writer.writerow(
            [
                _cell(record.lambda_a),
                _cell(record.mu_a),
                *(_cell(getattr(record.metrics, key)) for key in METRIC_KEYS),
            ]
        )
    return output.getvalue()


def write_report(report: BaseModel, json_path: Path, csv_text: str, csv_path: Path) -> None:
    """Write a report's JSON and CSV renderings (no timestamps, so reruns are identical)."""
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2) + "\n")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(csv_text)


def write_sweep_report(report: SweepReport, output_dir: Path, stem: str = "sweep") -> None:
    write_report(
        report, output_dir / f"{stem}.json", grid_csv(report), output_dir / f"{stem}.csv"
    )


# Fixed-parameter experiment: alpha-weighted loss with a preset material or diffusion.

DEFAULT_ALPHAS = tuple(k / 10 for k in range(11))
DEFAULT_REGULARIZERS = (
    "diffusion",
    "lung_stiff",
    "lung_stiff*0.1",
    "lung_stiff*0.01",
    "lung_soft",
    "lung_soft*0.1",
    "lung_soft*0.01",
)


def resolve_regularizer(name: str) -> RawElasticity | None:
    """``diffusion`` -> None; ``<preset>`` or ``<preset>*<factor>`` -> scaled material."""
    if name == "diffusion":
        return None
    preset, _, factor = name.partition("*")
    if preset not in ELASTICITY_PRESETS:
        known = ", ".join(sorted(ELASTICITY_PRESETS))
        msg = f"Unknown regularizer '{name}' (diffusion or one of: {known})"
        raise ParameterError(msg)
    material = ELASTICITY_PRESETS[preset]
    if not factor:
        return material
    try:
        return material.scaled(float(factor))
    except ValueError as e:
        msg = f"Invalid scale factor in regularizer '{name}'"
        raise ParameterError(msg) from e


class AlphaCaseRecord(BaseModel):
    """One (regularizer, alpha) setting registered on one case."""

    regularizer: str
    alpha: float
    case: str
    loss: float
    metrics: MetricsReport


class AlphaRecord(BaseModel):
    regularizer: str
    alpha: float
    cases: int
    loss_mean: float
    metrics: MetricsReport
    std: dict[str, float | None] = Field(default_factory=dict)


class AlphaSweepReport(BaseModel):
    case_records: list[AlphaCaseRecord] = Field(default_factory=list)
    records: list[AlphaRecord] = Field(default_factory=list)


def aggregate_alpha(records: Sequence[AlphaCaseRecord]) -> AlphaRecord:
    """Unweighted mean over cases of one (regularizer, alpha) setting."""
    if not records:
        msg = "Cannot aggregate an empty record set"
        raise EvaluationError(msg)
    settings = {(r.regularizer, r.alpha) for r in records}
    if len(settings) > 1:
        msg = f"Records mix several alpha-sweep settings: {sorted(settings)}"
        raise EvaluationError(msg)
    metrics, spreads = _summarize([r.metrics for r in records])
    return AlphaRecord(
        regularizer=records[0].regularizer,
        alpha=records[0].alpha,
        cases=len(records),
        loss_mean=float(np.mean([r.loss for r in records])),
        metrics=metrics,
        std=spreads,
    )


def run_alpha_sweep(
    cases: Sequence[EvalCase],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    regularizers: Sequence[str] = DEFAULT_REGULARIZERS,
    config: OptimizerConfig | None = None,
    jobs: int = 1,
) -> AlphaSweepReport:
    """Instance registration for every (regularizer, alpha), averaged over cases."""
    if not cases:
        msg = "Alpha sweep needs at least one case"
        raise EvaluationError(msg)
    config = config or OptimizerConfig()
    materials = {name: resolve_regularizer(name) for name in regularizers}
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            msg = f"Regularization weight alpha must lie in [0, 1], got {alpha}"
            raise ParameterError(msg)

    def run_one(task: tuple[str, float, EvalCase]) -> AlphaCaseRecord:
        name, alpha, case = task
        weighting = AlphaWeighting(alpha=alpha, elasticity=materials[name])
        result = register_pair(case.fixed, case.moving, weighting, config)
        return AlphaCaseRecord(
            regularizer=name,
            alpha=alpha,
            case=case.name,
            loss=result.final_terms.loss,
            metrics=evaluate_field(result.field, case),
        )

    tasks = [(name, alpha, case) for name in regularizers for alpha in alphas for case in cases]
    logger.info(
        "Alpha sweep: %d regularizers x %d weights x %d cases",
        len(regularizers),
        len(alphas),
        len(cases),
    )
    case_records = _fan_out(run_one, tasks, jobs)
    per_setting = len(cases)
    return AlphaSweepReport(
        case_records=case_records,
        records=[
            aggregate_alpha(case_records[k : k + per_setting])
            for k in range(0, len(case_records), per_setting)
        ],
    )


def alpha_csv(report: AlphaSweepReport) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(ALPHA_CSV_HEADER)
    for record in report.records:
        writer.writerow(
            [
                record.regularizer,
                _cell(record.alpha),
                *(_cell(getattr(record.metrics, key)) for key in METRIC_KEYS),
            ]
        )
    return output.getvalue()


def write_alpha_report(report: AlphaSweepReport, output_dir: Path, stem: str = "alpha_sweep") -> None:
    write_report(
        report, output_dir / f"{stem}.json", alpha_csv(report), output_dir / f"{stem}.csv"
    )
