"""Synthetic image pairs with a known ground-truth displacement.

The moving image is drawn analytically around blob centers; the fixed image is
the moving image warped by the true field, so the true field is an exact
registration solution. Fixed keypoints sit on integer voxels and map onto the
moving blob centers through the true field.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .exceptions import PhantomError
from .grid import (
    DisplacementField,
    GridDomain,
    ScalarGrid,
    interior_mask,
    jacobian_determinant,
    voxel_coordinates,
    warp,
)
from .metrics import EvalCase, KeypointSet, LabelGrid, warp_labels
from .volume_io import (
    CaseSpec,
    save_field,
    save_keypoints,
    save_labels,
    save_volume,
    write_manifest,
)

logger = logging.getLogger(__name__)

LABEL_RADIUS_FACTOR = 1.5


class PhantomSpec(BaseModel):
    """Generator settings; lengths are in voxels unless noted."""

    dims: tuple[int, ...] = (64, 64)
    spacing: tuple[float, ...] | None = None
    pattern: Literal["gaussian-blobs", "checker-smooth"] = "gaussian-blobs"
    family: Literal["affine", "gaussian-bump", "rotation"] = "gaussian-bump"
    amplitude: float = Field(3.0, ge=0.0)
    bump_sigma: float | None = Field(None, gt=0.0)
    matrix: list[list[float]] | None = None
    translation: list[float] | None = None
    angle_deg: float = 5.0
    blob_count: int = Field(6, ge=1)
    blob_sigma: float = Field(2.5, gt=0.0)
    allow_folding: bool = False
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _check_dims(cls, dims: tuple[int, ...]) -> tuple[int, ...]:
        if len(dims) not in (2, 3) or any(n < 8 for n in dims):
            msg = f"Phantom dims must be 2D or 3D with every axis >= 8, got {dims}"
            raise ValueError(msg)
        return dims

    @property
    def domain(self) -> GridDomain:
        spacing = self.spacing or (1.0,) * len(self.dims)
        return GridDomain(dims=self.dims, spacing=spacing)


@dataclass(frozen=True, eq=False)
class Phantom:
    case: EvalCase
    true_field: DisplacementField

    @property
    def fixed(self) -> ScalarGrid:
        return self.case.fixed

    @property
    def moving(self) -> ScalarGrid:
        return self.case.moving


def _center(domain: GridDomain) -> np.ndarray:
    return (np.asarray(domain.dims, dtype=np.float64) - 1.0) / 2.0


def _affine_field(spec: PhantomSpec, coords: np.ndarray) -> np.ndarray:
    ndim = coords.shape[-1]
    matrix = np.eye(ndim) if spec.matrix is None else np.asarray(spec.matrix, dtype=np.float64)
    translation = np.zeros(ndim) if spec.translation is None else np.asarray(spec.translation)
    if matrix.shape != (ndim, ndim) or translation.shape != (ndim,):
        msg = f"Affine parameters must be {ndim}x{ndim} and length {ndim}"
        raise PhantomError(msg)
    offset = coords - _center(spec.domain)
    return offset @ (matrix - np.eye(ndim)).T + translation


def _bump_field(spec: PhantomSpec, coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dims = np.asarray(spec.dims, dtype=np.float64)
    sigma = spec.bump_sigma or float(dims.min()) / 5.0
    center = _center(spec.domain) + rng.uniform(-1.0, 1.0, size=dims.size) * dims / 8.0
    direction = rng.normal(size=dims.size)
    direction /= np.linalg.norm(direction)
    radius2 = np.sum((coords - center) ** 2, axis=-1)
    profile = spec.amplitude * np.exp(-radius2 / (2.0 * sigma * sigma))
    return profile[..., None] * direction


def _rotation_field(spec: PhantomSpec, coords: np.ndarray) -> np.ndarray:
    angle = math.radians(spec.angle_deg)
    rotation = np.eye(coords.shape[-1])
    rotation[:2, :2] = [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
    offset = coords - _center(spec.domain)
    return offset @ rotation.T - offset


def true_displacement(spec: PhantomSpec, rng: np.random.Generator) -> DisplacementField:
    domain = spec.domain
    coords = voxel_coordinates(domain)
    if spec.family == "affine":
        vectors = _affine_field(spec, coords)
    elif spec.family == "gaussian-bump":
        vectors = _bump_field(spec, coords, rng)
    else:
        vectors = _rotation_field(spec, coords)
    return DisplacementField(domain, vectors)


def _gaussian_blobs(
    coords: np.ndarray, centers: np.ndarray, heights: np.ndarray, sigma: float
) -> np.ndarray:
    image = np.zeros(coords.shape[:-1])
    for center, height in zip(centers, heights, strict=True):
        radius2 = np.sum((coords - center) ** 2, axis=-1)
        image += height * np.exp(-radius2 / (2.0 * sigma * sigma))
    return image


def _blob_labels(coords: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    labels = np.zeros(coords.shape[:-1], dtype=np.int32)
    for k, center in enumerate(centers):
        inside = np.sum((coords - center) ** 2, axis=-1) <= radius * radius
        labels[inside] = k + 1
    return labels


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Build (fixed, moving, true field, labels, keypoints) for one seed."""
    rng = np.random.default_rng(spec.seed)
    domain = spec.domain
    field = true_displacement(spec, rng)

    det = jacobian_determinant(field).values[interior_mask(domain)]
    if det.min() <= 0 and not spec.allow_folding:
        msg = f"Ground-truth field folds (min det {det.min():.4f}); set allow_folding to keep it"
        raise PhantomError(msg)

    dims = np.asarray(spec.dims)
    margin = np.minimum(int(math.ceil(2.0 * spec.blob_sigma + spec.amplitude)), dims // 4)
    fixed_points = np.stack(
        [
            rng.integers(int(margin[a]), int(dims[a] - margin[a]), size=spec.blob_count)
            for a in range(dims.size)
        ],
        axis=-1,
    ).astype(np.float64)
    index = tuple(fixed_points.astype(np.intp).T)
    moving_points = fixed_points + field.vectors[index]
    extent = dims - 1.0
    if np.any(moving_points < 0) or np.any(moving_points > extent):
        msg = "Ground-truth field moves a blob center outside the domain"
        raise PhantomError(msg)

    coords = voxel_coordinates(domain)
    heights = rng.uniform(0.5, 1.0, size=spec.blob_count)
    values = _gaussian_blobs(coords, moving_points, heights, spec.blob_sigma)
    if spec.pattern == "checker-smooth":
        period = max(float(dims.min()) / 4.0, 4.0)
        texture = np.prod(np.sin(np.pi * coords / period), axis=-1)
        values = values + 0.25 * (texture + 1.0)
    moving = ScalarGrid(domain, values)
    fixed = warp(moving, field)

    moving_labels = LabelGrid(
        domain, _blob_labels(coords, moving_points, LABEL_RADIUS_FACTOR * spec.blob_sigma)
    )
    fixed_labels = warp_labels(moving_labels, field)
    spacing = np.asarray(domain.spacing)
    case = EvalCase(
        name=f"phantom-{spec.seed}",
        fixed=fixed,
        moving=moving,
        fixed_labels=fixed_labels,
        moving_labels=moving_labels,
        fixed_keypoints=KeypointSet(fixed_points * spacing),
        moving_keypoints=KeypointSet(moving_points * spacing),
    )
    logger.debug(
        "Phantom seed %d: %s field, max |u| %.3f, min det %.4f",
        spec.seed,
        spec.family,
        float(np.abs(field.vectors).max()),
        float(det.min()),
    )
    return Phantom(case, field)


def phantom_series(spec: PhantomSpec, count: int) -> list[PhantomSpec]:
    """``count`` variants of ``spec`` with consecutive seeds."""
    return [spec.model_copy(update={"seed": spec.seed + k}) for k in range(count)]


def write_corpus(directory: Path, specs: list[PhantomSpec]) -> list[CaseSpec]:
    """Write one sub-directory per phantom plus the ``cases.yaml`` manifest."""
    directory = Path(directory)
    entries = []
    for spec in specs:
        phantom = make_phantom(spec)
        case = phantom.case
        case_dir = directory / case.name
        save_volume(case.fixed, case_dir / "fixed.rvol")
        save_volume(case.moving, case_dir / "moving.rvol")
        save_labels(case.fixed_labels, case_dir / "fixed_labels.rvol")
        save_labels(case.moving_labels, case_dir / "moving_labels.rvol")
        save_keypoints(case.fixed_keypoints, case_dir / "fixed_keypoints.csv")
        save_keypoints(case.moving_keypoints, case_dir / "moving_keypoints.csv")
        save_field(phantom.true_field, case_dir / "true_field.rvol")
        entries.append(
            CaseSpec(
                name=case.name,
                fixed=Path(case.name, "fixed.rvol"),
                moving=Path(case.name, "moving.rvol"),
                fixed_labels=Path(case.name, "fixed_labels.rvol"),
                moving_labels=Path(case.name, "moving_labels.rvol"),
                fixed_keypoints=Path(case.name, "fixed_keypoints.csv"),
                moving_keypoints=Path(case.name, "moving_keypoints.csv"),
                normalization="none",
            )
        )
    write_manifest(directory, entries)
    logger.info("Wrote %d phantom cases to %s", len(entries), directory)
    return entries
