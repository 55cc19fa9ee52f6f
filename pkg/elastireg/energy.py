"""Similarity and regularization energies with closed-form displacement gradients.

All integral energies are voxel means, so weights stay comparable across grid
sizes. Derivatives are forward differences divided by the physical spacing.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import uniform_filter

from .exceptions import ParameterError
from .grid import (
    DisplacementField,
    GridDomain,
    ScalarGrid,
    difference,
    difference_adjoint,
    warp_with_gradient,
)

logger = logging.getLogger(__name__)

DEFAULT_NCC_WINDOW = 9
NCC_EPSILON = 1e-5
CONSTRAINT_TOLERANCE = 1e-9
ROUNDOFF_FACTOR = 1e3


class ElasticityParams(BaseModel):
    """Absorbed-weight elasticity pair with 0 <= lambda_a + mu_a <= 1."""

    model_config = ConfigDict(frozen=True)

    lambda_a: float = Field(0.0, ge=0.0)
    mu_a: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_simplex(self) -> ElasticityParams:
        if self.lambda_a + self.mu_a > 1.0 + CONSTRAINT_TOLERANCE:
            msg = (
                "Elasticity parameters violate lambda_a + mu_a <= 1: "
                f"{self.lambda_a} + {self.mu_a}"
            )
            raise ValueError(msg)
        return self

    @property
    def total(self) -> float:
        return self.lambda_a + self.mu_a

    @property
    def similarity_weight(self) -> float:
        """Weight 1 - lambda_a - mu_a of the dissimilarity term."""
        weight = 1.0 - self.lambda_a - self.mu_a
        return 0.0 if weight < CONSTRAINT_TOLERANCE else weight

    def as_raw(self) -> RawElasticity:
        return RawElasticity(lam=self.lambda_a, mu=self.mu_a)


class RawElasticity(BaseModel):
    """Unconstrained Lame parameters (lambda, mu) as reported for tissue."""

    model_config = ConfigDict(frozen=True)

    lam: float = Field(..., ge=0.0)
    mu: float = Field(..., ge=0.0)

    @property
    def ratio(self) -> float | None:
        return self.lam / self.mu if self.mu > 0 else None

    def scaled(self, factor: float) -> RawElasticity:
        """Rescale both parameters, keeping their ratio."""
        if factor < 0:
            msg = f"Scale factor must be non-negative, got {factor}"
            raise ParameterError(msg)
        return RawElasticity(lam=self.lam * factor, mu=self.mu * factor)


ELASTICITY_PRESETS: dict[str, RawElasticity] = {
    "brain_high_ratio": RawElasticity(lam=12483.3, mu=25.0),
    "brain_low_ratio": RawElasticity(lam=540.8, mu=22.5),
    "lung_stiff": RawElasticity(lam=45.33, mu=8.0),
    "lung_soft": RawElasticity(lam=15.51, mu=1.72),
}


class AlphaWeighting(BaseModel):
    """Regularization weight alpha with a fixed elastic material or diffusion.

    ``elasticity=None`` selects the diffusion regularizer.
    """

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(..., ge=0.0, le=1.0)
    elasticity: RawElasticity | None = None


@dataclass(frozen=True, eq=False)
class EnergyValue:
    """Energy value with an optional gradient and named loss terms.

    The gradient is a DisplacementField for displacement energies and a
    ScalarGrid for image-space terms (``ncc_local``).
    """

    value: float
    gradient: DisplacementField | ScalarGrid | None = None
    terms: Mapping[str, float] = field(default_factory=dict)


def _check_window(window: int, domain: GridDomain) -> None:
    if window < 3 or window % 2 == 0:
        msg = f"NCC window must be odd and >= 3, got {window}"
        raise ParameterError(msg)
    if window > min(domain.dims):
        msg = f"NCC window {window} exceeds the smallest grid dimension {min(domain.dims)}"
        raise ParameterError(msg)


def _window_sum(array: np.ndarray, window: int) -> np.ndarray:
    """Sum over the in-domain part of the cubic window centred on each voxel."""
    mean = uniform_filter(array, size=window, mode="constant", cval=0.0)
    return mean * float(window) ** array.ndim


def ncc_local(
    fixed: ScalarGrid, moving_warped: ScalarGrid, window: int = DEFAULT_NCC_WINDOW
) -> EnergyValue:
    """Mean squared local correlation coefficient between two images.

    Windows are truncated at the border so statistics only use in-domain
    voxels. Windows whose variance product is at most ``NCC_EPSILON`` count as
    zero correlation. The gradient is taken with respect to ``moving_warped``.
    """
    fixed.domain.require_same(moving_warped.domain, "fixed and warped moving images")
    _check_window(window, fixed.domain)
    i_img = fixed.values
    j_img = moving_warped.values

    count = _window_sum(np.ones_like(i_img), window)
    sum_i = _window_sum(i_img, window)
    sum_j = _window_sum(j_img, window)
    sum_ii = _window_sum(i_img * i_img, window)
    sum_jj = _window_sum(j_img * j_img, window)
    sum_ij = _window_sum(i_img * j_img, window)

    mean_i = sum_i / count
    mean_j = sum_j / count
    cross = sum_ij - sum_i * mean_j
    var_i = sum_ii - sum_i * mean_i
    var_j = sum_jj - sum_j * mean_j
    denom = var_i * var_j

    valid = denom > NCC_EPSILON
    safe_denom = np.where(valid, denom, 1.0)
    safe_var_j = np.where(valid, var_j, 1.0)
    cc = np.where(valid, cross * cross / safe_denom, 0.0)
    value = float(cc.mean())

    # d cc_x / d J_y = alpha_x (I_y - mean_i_x) - beta_x (J_y - mean_j_x) for y in W_x
    alpha = np.where(valid, 2.0 * cross / safe_denom, 0.0)
    beta = np.where(valid, 2.0 * cc / safe_var_j, 0.0)
    grad = (
        i_img * _window_sum(alpha, window)
        - _window_sum(alpha * mean_i, window)
        - j_img * _window_sum(beta, window)
        + _window_sum(beta * mean_j, window)
    ) / cc.size
    return EnergyValue(value=value, gradient=ScalarGrid(fixed.domain, grad))


def _derivatives(field: DisplacementField) -> list[list[np.ndarray]]:
    """``d[i][j]`` is the forward difference of u_j along axis i (physical units)."""
    ndim = field.domain.ndim
    return [
        [
            difference(field.vectors[..., j], i, field.domain.spacing[i])
            for j in range(ndim)
        ]
        for i in range(ndim)
    ]


def _backpropagate(
    field: DisplacementField, adjoints: list[list[np.ndarray]]
) -> DisplacementField:
    """Map adjoints of every ``d[i][j]`` back onto the displacement components."""
    ndim = field.domain.ndim
    grad = np.zeros(field.vectors.shape)
    for j in range(ndim):
        for i in range(ndim):
            grad[..., j] += difference_adjoint(
                adjoints[i][j], i, field.domain.spacing[i]
            )
    return DisplacementField(field.domain, grad / field.domain.voxel_count)


def diffusion_density(field: DisplacementField) -> ScalarGrid:
    """Per-voxel sum over i, j of (d_i u_j)^2."""
    derivs = _derivatives(field)
    density = sum(d * d for row in derivs for d in row)
    return ScalarGrid(field.domain, density)


def diffusion_energy(field: DisplacementField) -> EnergyValue:
    derivs = _derivatives(field)
    density = sum(d * d for row in derivs for d in row)
    adjoints = [[2.0 * d for d in row] for row in derivs]
    return EnergyValue(
        value=float(np.mean(density)), gradient=_backpropagate(field, adjoints)
    )


def _strain_terms(
    field: DisplacementField,
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]], np.ndarray]:
    derivs = _derivatives(field)
    ndim = field.domain.ndim
    sym = [[derivs[i][j] + derivs[j][i] for j in range(ndim)] for i in range(ndim)]
    div = sum(derivs[i][i] for i in range(ndim))
    return derivs, sym, div


def elastic_density(field: DisplacementField, params: RawElasticity) -> ScalarGrid:
    """Per-voxel mu/4 * sum (d_i u_j + d_j u_i)^2 + lambda/2 * (div u)^2."""
    _, sym, div = _strain_terms(field)
    shear = sum(s * s for row in sym for s in row)
    return ScalarGrid(field.domain, 0.25 * params.mu * shear + 0.5 * params.lam * div * div)


def elastic_energy(field: DisplacementField, params: RawElasticity) -> EnergyValue:
    """Variational linear-elastic energy, averaged over voxels."""
    _, sym, div = _strain_terms(field)
    ndim = field.domain.ndim
    shear = sum(s * s for row in sym for s in row)
    density = 0.25 * params.mu * shear + 0.5 * params.lam * div * div
    adjoints = [
        [
            params.mu * sym[i][j] + (params.lam * div if i == j else 0.0)
            for j in range(ndim)
        ]
        for i in range(ndim)
    ]
    return EnergyValue(
        value=float(np.mean(density)), gradient=_backpropagate(field, adjoints)
    )


def _similarity_term(
    fixed: ScalarGrid, moving: ScalarGrid, field: DisplacementField, window: int
) -> tuple[float, np.ndarray]:
    """Return (ncc, d(1 - ncc)/du) for the warped moving image."""
    fixed.domain.require_same(moving.domain, "fixed and moving images")
    warped, image_gradient = warp_with_gradient(moving, field)
    similarity = ncc_local(fixed, warped, window)
    grad = -similarity.gradient.values[..., None] * image_gradient
    return similarity.value, grad


def _weighted_loss(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    field: DisplacementField,
    similarity_weight: float,
    regularizer: EnergyValue,
    regularizer_weight: float,
    window: int,
) -> EnergyValue:
    ncc, sim_grad = _similarity_term(fixed, moving, field, window)
    value = similarity_weight * (1.0 - ncc) + regularizer_weight * regularizer.value
    grad = similarity_weight * sim_grad + regularizer_weight * regularizer.gradient.vectors
    return EnergyValue(
        value=float(value),
        gradient=DisplacementField(field.domain, grad),
        terms={
            "similarity": ncc,
            "similarity_weight": similarity_weight,
            "regularization": regularizer.value,
            "regularization_weight": regularizer_weight,
        },
    )


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        msg = f"Regularization weight alpha must lie in [0, 1], got {alpha}"
        raise ParameterError(msg)


def composite_loss_eq4(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    field: DisplacementField,
    alpha: float,
    params: RawElasticity,
    window: int = DEFAULT_NCC_WINDOW,
) -> EnergyValue:
    """(1 - alpha) * (1 - NCC) + alpha * elastic energy with fixed (lambda, mu)."""
    _check_alpha(alpha)
    return _weighted_loss(
        fixed, moving, field, 1.0 - alpha, elastic_energy(field, params), alpha, window
    )


def composite_loss_eq5(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    field: DisplacementField,
    params: ElasticityParams,
    window: int = DEFAULT_NCC_WINDOW,
) -> EnergyValue:
    """(1 - lambda_a - mu_a) * (1 - NCC) + elastic energy with (lambda_a, mu_a)."""
    return _weighted_loss(
        fixed,
        moving,
        field,
        params.similarity_weight,
        elastic_energy(field, params.as_raw()),
        1.0,
        window,
    )


def composite_loss_diffusion(
    fixed: ScalarGrid,
    moving: ScalarGrid,
    field: DisplacementField,
    alpha: float,
    window: int = DEFAULT_NCC_WINDOW,
) -> EnergyValue:
    """(1 - alpha) * (1 - NCC) + alpha * diffusion energy."""
    _check_alpha(alpha)
    return _weighted_loss(
        fixed, moving, field, 1.0 - alpha, diffusion_energy(field), alpha, window
    )


def grad_check(
    energy: Callable[[DisplacementField], EnergyValue],
    field: DisplacementField,
    h: float = 1e-4,
    samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error ``|analytic - central| / (|analytic| + 1e-12)``.

    Checks a seeded random sample of displacement components. A component is
    skipped only when both its analytic and central-difference derivatives sit
    below the roundoff level of the difference quotient, so a wrong gradient on
    a near-zero component is still reported. Returns 0.0 when every sampled
    component is skipped.
    """
    if h <= 0:
        msg = f"Perturbation scale must be positive, got {h}"
        raise ParameterError(msg)
    analytic = energy(field).gradient.vectors
    rng = np.random.default_rng(seed)
    picks = rng.choice(field.vectors.size, size=min(samples, field.vectors.size), replace=False)
    worst = 0.0
    skipped = 0
    for flat in picks:
        index = np.unravel_index(flat, field.vectors.shape)
        plus = np.array(field.vectors)
        minus = np.array(field.vectors)
        plus[index] += h
        minus[index] -= h
        upper = energy(DisplacementField(field.domain, plus)).value
        lower = energy(DisplacementField(field.domain, minus)).value
        numeric = (upper - lower) / (2.0 * h)
        noise = ROUNDOFF_FACTOR * np.finfo(float).eps * max(abs(upper), abs(lower)) / h
        if max(abs(analytic[index]), abs(numeric)) <= noise:
            skipped += 1
            continue
        error = abs(analytic[index] - numeric) / (abs(analytic[index]) + 1e-12)
        worst = max(worst, float(error))
    logger.debug(
        "Gradient check: %d components checked, %d below roundoff, max relative error %.3e",
        len(picks) - skipped,
        skipped,
        worst,
    )
    return worst
