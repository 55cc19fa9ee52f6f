"""Dense grid containers, multilinear warping and forward finite differences.

Arrays are indexed ``[x, y(, z)]`` so numpy axis ``i`` is physical axis ``i``.
Files store voxels x-fastest, which is the Fortran-order ravel of these arrays.
Displacements are kept in voxel units.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.ndimage import map_coordinates

from .exceptions import ParameterError, ShapeError


class GridDomain(BaseModel):
    """Shape and physical spacing (mm) shared by grids combined in an operation."""

    model_config = ConfigDict(frozen=True)

    dims: tuple[int, ...]
    spacing: tuple[float, ...]

    @model_validator(mode="after")
    def _validate_geometry(self) -> GridDomain:
        if len(self.dims) not in (2, 3):
            msg = f"Grid dimensionality must be 2 or 3, got {len(self.dims)}"
            raise ValueError(msg)
        if len(self.spacing) != len(self.dims):
            msg = f"Spacing {self.spacing} does not match dims {self.dims}"
            raise ValueError(msg)
        if any(n < 1 for n in self.dims):
            msg = f"All dims must be positive, got {self.dims}"
            raise ValueError(msg)
        if any(not math.isfinite(s) or s <= 0 for s in self.spacing):
            msg = f"All spacing entries must be finite and > 0, got {self.spacing}"
            raise ValueError(msg)
        return self

    @classmethod
    def isotropic(cls, dims: tuple[int, ...], spacing: float = 1.0) -> GridDomain:
        return cls(dims=tuple(dims), spacing=(float(spacing),) * len(dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return math.prod(self.dims)

    @property
    def extent_mm(self) -> tuple[float, ...]:
        """Physical coordinate of the last voxel center along each axis."""
        return tuple((n - 1) * s for n, s in zip(self.dims, self.spacing, strict=True))

    def require_same(self, other: GridDomain, what: str = "grids") -> None:
        """Raise ShapeError unless ``other`` describes the same domain."""
        if self != other:
            msg = f"Domain mismatch between {what}"
            raise ShapeError(msg, f"{self.dims}/{self.spacing} vs {other.dims}/{other.spacing}")


def _frozen_array(values: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.shape != shape:
        msg = f"{what} has shape {array.shape}, expected {shape}"
        raise ShapeError(msg)
    if not np.all(np.isfinite(array)):
        msg = f"{what} contains non-finite values"
        raise ParameterError(msg)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """One real value per voxel: images, masks, determinant maps."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _frozen_array(self.values, self.domain.dims, "Grid values")
        )

    @classmethod
    def from_array(
        cls, values: np.ndarray, spacing: tuple[float, ...] | None = None
    ) -> ScalarGrid:
        array = np.asarray(values, dtype=np.float64)
        spacing = spacing or (1.0,) * array.ndim
        return cls(GridDomain(dims=array.shape, spacing=spacing), array)

    @classmethod
    def constant(cls, domain: GridDomain, value: float) -> ScalarGrid:
        return cls(domain, np.full(domain.dims, float(value)))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement u(x) in voxel units; the deformation is x + u(x)."""

    domain: GridDomain
    vectors: np.ndarray

    def __post_init__(self):
        shape = (*self.domain.dims, self.domain.ndim)
        object.__setattr__(
            self, "vectors", _frozen_array(self.vectors, shape, "Displacement vectors")
        )

    @classmethod
    def zeros(cls, domain: GridDomain) -> DisplacementField:
        return cls(domain, np.zeros((*domain.dims, domain.ndim)))

    @classmethod
    def from_array(
        cls, vectors: np.ndarray, spacing: tuple[float, ...] | None = None
    ) -> DisplacementField:
        array = np.asarray(vectors, dtype=np.float64)
        dims = array.shape[:-1]
        spacing = spacing or (1.0,) * len(dims)
        return cls(GridDomain(dims=dims, spacing=spacing), array)

    def component(self, index: int) -> np.ndarray:
        _check_axis(index, self.domain.ndim, "component")
        return self.vectors[..., index]

    def scaled(self, factor: float) -> DisplacementField:
        return DisplacementField(self.domain, self.vectors * factor)

    def __add__(self, other: DisplacementField) -> DisplacementField:
        self.domain.require_same(other.domain, "displacement fields")
        return DisplacementField(self.domain, self.vectors + other.vectors)


def _check_axis(index: int, ndim: int, what: str) -> None:
    if not 0 <= index < ndim:
        msg = f"{what} index {index} out of range for a {ndim}D grid"
        raise ShapeError(msg)


def voxel_coordinates(domain: GridDomain) -> np.ndarray:
    """Identity coordinates of every voxel center, shape ``dims + (D,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in domain.dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def interior_mask(domain: GridDomain) -> np.ndarray:
    """True where a voxel is not on the last slice along any axis."""
    mask = np.ones(domain.dims, dtype=bool)
    for axis in range(domain.ndim):
        index = [slice(None)] * domain.ndim
        index[axis] = -1
        mask[tuple(index)] = False
    return mask


def interpolate(
    array: np.ndarray, coords: np.ndarray, *, with_gradient: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Multilinear interpolation of ``array`` at voxel coordinates ``coords``.

    Coordinates are clamped to the domain, so out-of-domain samples replicate the
    edge. With ``with_gradient`` the derivative of the interpolant with respect to
    each coordinate is returned as well (zero where the coordinate was clamped).

    Args:
        array: Values indexed ``[x, y(, z)]``.
        coords: Sample positions, shape ``S + (D,)``.
        with_gradient: Whether to also return ``d value / d coords``.

    Returns:
        Sampled values of shape ``S`` and, optionally, gradients of shape ``S + (D,)``.
    """
    dims = array.shape
    ndim = len(dims)
    lower = []
    fraction = []
    active = []
    for axis, n in enumerate(dims):
        raw = coords[..., axis]
        clamped = np.clip(raw, 0.0, n - 1.0)
        if n == 1:
            base = np.zeros(raw.shape, dtype=np.intp)
        else:
            base = np.minimum(np.floor(clamped).astype(np.intp), n - 2)
        lower.append(base)
        fraction.append(clamped - base)
        active.append((raw >= 0.0) & (raw <= n - 1.0) & (n > 1))

    values = np.zeros(coords.shape[:-1])
    gradient = np.zeros(coords.shape) if with_gradient else None
    for corner in itertools.product((0, 1), repeat=ndim):
        index = tuple(
            np.minimum(lower[axis] + bit, dims[axis] - 1)
            for axis, bit in enumerate(corner)
        )
        sample = array[index]
        factors = [
            fraction[axis] if bit else 1.0 - fraction[axis]
            for axis, bit in enumerate(corner)
        ]
        values += np.prod(factors, axis=0) * sample
        if gradient is not None:
            for axis, bit in enumerate(corner):
                others = [f for k, f in enumerate(factors) if k != axis]
                weight = np.prod(others, axis=0) if others else 1.0
                gradient[..., axis] += (1.0 if bit else -1.0) * weight * sample
    if gradient is not None:
        for axis in range(ndim):
            gradient[..., axis] *= active[axis]
    return values, gradient


def resample(array: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Values of ``array`` at voxel coordinates ``coords`` (shape ``S + (D,)``).

    Multilinear with edge replication outside the domain, matching the values
    of :func:`interpolate`.
    """
    return map_coordinates(
        np.asarray(array, dtype=np.float64),
        np.moveaxis(np.asarray(coords, dtype=np.float64), -1, 0),
        order=1,
        mode="nearest",
    )


def warp(image: ScalarGrid, field: DisplacementField) -> ScalarGrid:
    """Resample ``image`` at x + u(x), i.e. compute M o phi on the image grid."""
    image.domain.require_same(field.domain, "image and displacement field")
    coords = voxel_coordinates(field.domain) + field.vectors
    return ScalarGrid(image.domain, resample(image.values, coords))


def warp_with_gradient(
    image: ScalarGrid, field: DisplacementField
) -> tuple[ScalarGrid, np.ndarray]:
    """Warp ``image`` and return the interpolant's spatial gradient at x + u(x).

    The gradient (voxel units, shape ``dims + (D,)``) is what chains an
    intensity-space derivative into a displacement-space derivative.
    """
    image.domain.require_same(field.domain, "image and displacement field")
    coords = voxel_coordinates(field.domain) + field.vectors
    values, gradient = interpolate(image.values, coords, with_gradient=True)
    return ScalarGrid(image.domain, values), gradient


def difference(array: np.ndarray, axis: int, step: float = 1.0) -> np.ndarray:
    """Forward difference along ``axis``; the last slice is zero."""
    result = np.zeros_like(array, dtype=np.float64)
    head = [slice(None)] * array.ndim
    tail = [slice(None)] * array.ndim
    head[axis] = slice(None, -1)
    tail[axis] = slice(1, None)
    result[tuple(head)] = (array[tuple(tail)] - array[tuple(head)]) / step
    return result


def difference_adjoint(array: np.ndarray, axis: int, step: float = 1.0) -> np.ndarray:
    """Transpose of :func:`difference`, used to backpropagate through it."""
    head = [slice(None)] * array.ndim
    tail = [slice(None)] * array.ndim
    head[axis] = slice(None, -1)
    tail[axis] = slice(1, None)
    live = array[tuple(head)]
    result = np.zeros_like(array, dtype=np.float64)
    result[tuple(head)] -= live
    result[tuple(tail)] += live
    return result / step


def forward_diff(field: DisplacementField, component: int, direction: int) -> ScalarGrid:
    """Return d u_component / d x_direction in physical units (voxel per mm)."""
    _check_axis(component, field.domain.ndim, "component")
    _check_axis(direction, field.domain.ndim, "direction")
    step = field.domain.spacing[direction]
    return ScalarGrid(
        field.domain, difference(field.vectors[..., component], direction, step)
    )


def jacobian_determinant(field: DisplacementField) -> ScalarGrid:
    """Per-voxel det(I + grad u) with derivatives taken in voxel units."""
    ndim = field.domain.ndim
    jac = [
        [
            difference(field.vectors[..., i], j) + (1.0 if i == j else 0.0)
            for j in range(ndim)
        ]
        for i in range(ndim)
    ]
    if ndim == 2:
        det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
    else:
        det = (
            jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
        )
    return ScalarGrid(field.domain, det)
