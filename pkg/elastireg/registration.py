"""Instance optimization of a dense displacement field with Adam.

The objective is minimized directly over u for one image pair, optionally
coarse-to-fine over a box-averaged image pyramid.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .energy import (
    DEFAULT_NCC_WINDOW,
    AlphaWeighting,
    ElasticityParams,
    EnergyValue,
    composite_loss_diffusion,
    composite_loss_eq4,
    composite_loss_eq5,
)
from .exceptions import NumericalError, ParameterError
from .grid import (
    DisplacementField,
    GridDomain,
    ScalarGrid,
    resample,
    voxel_coordinates,
)

logger = logging.getLogger(__name__)

Objective = Callable[[DisplacementField], EnergyValue]
Weighting = ElasticityParams | AlphaWeighting


class OptimizerConfig(BaseModel):
    """Adam and schedule settings for one registration or training run.

    ``learning_rate`` may be 0, which freezes the parameters.
    """

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(1e-4, ge=0.0)
    steps: int = Field(250, ge=1)
    adam_beta1: float = Field(0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    pyramid_levels: int = Field(1, ge=1)
    convergence_tol: float = Field(0.0, ge=0.0)
    ncc_window: int = Field(DEFAULT_NCC_WINDOW, ge=3)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moment estimates plus the number of updates taken."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> AdamState:
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_update(
    params: np.ndarray, gradient: np.ndarray, state: AdamState, config: OptimizerConfig
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on a flat or shaped parameter array."""
    if not np.all(np.isfinite(gradient)):
        msg = "Non-finite gradient passed to the optimizer"
        raise NumericalError(msg, step=state.t)
    t = state.t + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * state.m + (1.0 - b1) * gradient
    v = b2 * state.v + (1.0 - b2) * gradient * gradient
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    updated = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return updated, AdamState(m, v, t)


def adam_step(
    field: DisplacementField,
    gradient: DisplacementField,
    state: AdamState,
    config: OptimizerConfig,
) -> tuple[DisplacementField, AdamState]:
    field.domain.require_same(gradient.domain, "field and gradient")
    vectors, state = adam_update(field.vectors, gradient.vectors, state, config)
    return DisplacementField(field.domain, vectors), state


class LossTerms(BaseModel):
    """Loss decomposition at the returned field."""

    loss: float
    similarity: float
    similarity_weight: float
    regularization: float
    regularization_weight: float

    @classmethod
    def from_energy(cls, energy: EnergyValue) -> LossTerms:
        return cls(loss=energy.value, **energy.terms)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    field: DisplacementField
    loss_trace: list[float] = field(default_factory=list)
    final_terms: LossTerms | None = None

    def sidecar(self) -> dict:
        """JSON-ready summary written next to the saved field."""
        return {
            "steps": len(self.loss_trace),
            "loss_trace": list(self.loss_trace),
            "final_terms": self.final_terms.model_dump() if self.final_terms else None,
        }


def make_objective(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    weighting: Weighting,
    window: int = DEFAULT_NCC_WINDOW,
) -> Objective:
    """Bind a loss to an image pair.

    ElasticityParams selects the absorbed-weight loss; AlphaWeighting selects the
    alpha-weighted elastic loss, or the diffusion loss when it has no material.
    """
    fixed.domain.require_same(moving.domain, "fixed and moving images")
    if isinstance(weighting, ElasticityParams):
        return lambda u: composite_loss_eq5(fixed, moving, u, weighting, window)
    if weighting.elasticity is None:
        return lambda u: composite_loss_diffusion(fixed, moving, u, weighting.alpha, window)
    return lambda u: composite_loss_eq4(
        fixed, moving, u, weighting.alpha, weighting.elasticity, window
    )


def minimize(
    objective: Objective, initial: DisplacementField, config: OptimizerConfig
) -> tuple[DisplacementField, list[float], EnergyValue]:
    """Run Adam on ``objective`` from ``initial``.

    Returns the final field, the loss evaluated before each executed update and
    the energy at the final field. With ``convergence_tol > 0`` the loop stops
    once the relative change between consecutive losses drops to the tolerance.
    """
    field = initial
    state = AdamState.zeros(field.vectors.shape)
    trace: list[float] = []
    for step in range(config.steps):
        energy = objective(field)
        if not np.isfinite(energy.value):
            msg = "Registration loss became non-finite"
            raise NumericalError(msg, step=step)
        trace.append(energy.value)
        field, state = adam_step(field, energy.gradient, state, config)
        if step % 50 == 0:
            logger.debug("step %d loss %.6f", step, energy.value)
        if config.convergence_tol > 0 and step > 0:
            previous = trace[-2]
            change = abs(previous - energy.value) / max(abs(previous), 1e-12)
            if change <= config.convergence_tol:
                logger.debug("Converged after %d steps (relative change %.2e)", step + 1, change)
                break
    final = objective(field)
    if not np.isfinite(final.value):
        msg = "Registration loss became non-finite"
        raise NumericalError(msg, step=len(trace))
    return field, trace, final


def _downsample(values: np.ndarray) -> np.ndarray:
    for axis in range(values.ndim):
        if values.shape[axis] % 2:
            edge = np.take(values, [-1], axis=axis)
            values = np.concatenate([values, edge], axis=axis)
        even = np.take(values, np.arange(0, values.shape[axis], 2), axis=axis)
        odd = np.take(values, np.arange(1, values.shape[axis], 2), axis=axis)
        values = 0.5 * (even + odd)
    return values


def build_pyramid(grid: ScalarGrid, levels: int) -> list[ScalarGrid]:
    """Return ``[grid, grid/2, grid/4, ...]`` by 2x box averaging.

    Odd axes are padded by replicating the last slice before averaging.
    """
    if levels < 1:
        msg = f"Pyramid needs at least one level, got {levels}"
        raise ParameterError(msg)
    factor = 2 ** (levels - 1)
    if any(n < factor for n in grid.domain.dims):
        msg = f"Dims {grid.domain.dims} too small for {levels} pyramid levels"
        raise ParameterError(msg)
    pyramid = [grid]
    for _ in range(levels - 1):
        coarse = _downsample(pyramid[-1].values)
        spacing = tuple(2.0 * s for s in pyramid[-1].domain.spacing)
        pyramid.append(ScalarGrid(GridDomain(dims=coarse.shape, spacing=spacing), coarse))
    return pyramid


def upsample_field(field: DisplacementField, domain: GridDomain) -> DisplacementField:
    """Carry a coarse displacement onto the next finer grid.

    Fine voxel x sits at coarse coordinate (x + 0.5) / 2 - 0.5; vectors are rescaled by
    the spacing ratio so they stay in voxel units of the finer grid.
    """
    coords = voxel_coordinates(domain)
    ratios = [
        coarse / fine
        for coarse, fine in zip(field.domain.spacing, domain.spacing, strict=True)
    ]
    coarse_coords = np.stack(
        [(coords[..., axis] + 0.5) / ratio - 0.5 for axis, ratio in enumerate(ratios)],
        axis=-1,
    )
    vectors = np.stack(
        [
            ratio * resample(field.vectors[..., axis], coarse_coords)
            for axis, ratio in enumerate(ratios)
        ],
        axis=-1,
    )
    return DisplacementField(domain, vectors)


def _level_window(window: int, domain: GridDomain) -> int:
    smallest = min(domain.dims)
    if window <= smallest:
        return window
    return smallest if smallest % 2 else smallest - 1


def register_pair(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    weighting: Weighting,
    config: OptimizerConfig | None = None,
) -> RegistrationResult:
    """Register ``moving`` onto ``fixed`` from a zero displacement.

    Each pyramid level runs ``config.steps`` updates; the loss trace concatenates
    all levels, coarsest first. Coarse levels shrink the NCC window to fit.
    """
    config = config or OptimizerConfig()
    fixed.domain.require_same(moving.domain, "fixed and moving images")
    levels = config.pyramid_levels
    fixed_levels = build_pyramid(fixed, levels)
    moving_levels = build_pyramid(moving, levels)

    field = DisplacementField.zeros(fixed_levels[-1].domain)
    trace: list[float] = []
    final: EnergyValue | None = None
    for level in reversed(range(levels)):
        domain = fixed_levels[level].domain
        if field.domain != domain:
            field = upsample_field(field, domain)
        objective = make_objective(
            fixed_levels[level],
            moving_levels[level],
            weighting,
            _level_window(config.ncc_window, domain),
        )
        field, level_trace, final = minimize(objective, field, config)
        trace.extend(level_trace)
        logger.debug(
            "Level %d (%s): %d steps, loss %.6f", level, domain.dims, len(level_trace), final.value
        )

    logger.info("Registration finished after %d steps, loss %.6f", len(trace), final.value)
    return RegistrationResult(field, trace, LossTerms.from_energy(final))
