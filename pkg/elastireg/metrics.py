"""Registration quality metrics: Dice overlap, keypoint TRE and folding fraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import EvaluationError, ShapeError
from .grid import (
    DisplacementField,
    GridDomain,
    ScalarGrid,
    interior_mask,
    jacobian_determinant,
    resample,
    voxel_coordinates,
)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Integer segmentation, 0 is background."""

    domain: GridDomain
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.shape != self.domain.dims:
            msg = f"Labels have shape {labels.shape}, expected {self.domain.dims}"
            raise ShapeError(msg)
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                msg = "Label values must be integers"
                raise ShapeError(msg)
        labels = labels.astype(np.int32)
        if np.any(labels < 0):
            msg = "Label values must be non-negative"
            raise ShapeError(msg)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def foreground(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Landmarks in physical millimeter coordinates, shape (K, D)."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] not in (2, 3):
            msg = f"Keypoints must have shape (K, 2|3) with K >= 1, got {points.shape}"
            raise ShapeError(msg)
        if not np.all(np.isfinite(points)):
            msg = "Keypoint coordinates must be finite"
            raise EvaluationError(msg)
        points.flags.writeable = False
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def shifted(self, offset_mm: np.ndarray) -> KeypointSet:
        return KeypointSet(self.points + np.asarray(offset_mm, dtype=np.float64))


class MetricsReport(BaseModel):
    """Metric triple for one registered pair (or a mean over pairs).

    Entries are None when the case lacks the data to compute them.
    """

    dice: dict[str, float] = Field(default_factory=dict)
    dice_mean: float | None = None
    tre_mean_mm: float | None = None
    tre_std_mm: float | None = None
    neg_jac_fraction: float = 0.0


@dataclass(frozen=True, eq=False)
class EvalCase:
    """One image pair plus whatever evaluation data exists for it."""

    name: str
    fixed: ScalarGrid
    moving: ScalarGrid
    fixed_labels: LabelGrid | None = None
    moving_labels: LabelGrid | None = None
    fixed_keypoints: KeypointSet | None = None
    moving_keypoints: KeypointSet | None = None

    def __post_init__(self):
        self.fixed.domain.require_same(self.moving.domain, f"images of case {self.name}")
        for labels in (self.fixed_labels, self.moving_labels):
            if labels is not None:
                self.fixed.domain.require_same(labels.domain, f"labels of case {self.name}")

    @property
    def domain(self) -> GridDomain:
        return self.fixed.domain

    @property
    def has_labels(self) -> bool:
        return self.fixed_labels is not None and self.moving_labels is not None

    @property
    def has_keypoints(self) -> bool:
        return self.fixed_keypoints is not None and self.moving_keypoints is not None


def dice(a: LabelGrid, b: LabelGrid, label: int) -> float:
    """2|A and B| / (|A| + |B|) for one label; 1.0 when both masks are empty."""
    if a.labels.shape != b.labels.shape:
        msg = f"Label grids differ in dims: {a.labels.shape} vs {b.labels.shape}"
        raise ShapeError(msg)
    mask_a = a.labels == label
    mask_b = b.labels == label
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(mask_a, mask_b).sum()) / total


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def warp_labels(labels: LabelGrid, field: DisplacementField) -> LabelGrid:
    """Nearest-neighbor resampling at x + u(x).

    Coordinates are rounded half away from zero and clamped to the grid.
    """
    labels.domain.require_same(field.domain, "labels and displacement field")
    coords = _round_half_away(voxel_coordinates(field.domain) + field.vectors)
    index = tuple(
        np.clip(coords[..., axis], 0, n - 1).astype(np.intp)
        for axis, n in enumerate(field.domain.dims)
    )
    return LabelGrid(labels.domain, labels.labels[index])


def tre(
    fixed_pts: KeypointSet, moving_pts: KeypointSet, field: DisplacementField
) -> tuple[float, float]:
    """Mean and population std (mm) of |x_f + u(x_f) - x_m| over keypoint pairs.

    Fixed keypoints are mapped through the field into moving space; u is
    interpolated multilinearly at each point and converted to mm.
    """
    if len(fixed_pts) != len(moving_pts):
        msg = f"Keypoint counts differ: {len(fixed_pts)} vs {len(moving_pts)}"
        raise EvaluationError(msg)
    domain = field.domain
    if fixed_pts.points.shape[1] != domain.ndim or moving_pts.points.shape[1] != domain.ndim:
        msg = f"Keypoints must be {domain.ndim}D for this field"
        raise ShapeError(msg)
    spacing = np.asarray(domain.spacing)
    extent = np.asarray(domain.extent_mm)
    tolerance = 1e-9 * np.maximum(extent, 1.0)
    for role, points in (("Fixed", fixed_pts.points), ("Moving", moving_pts.points)):
        outside = np.any((points < -tolerance) | (points > extent + tolerance), axis=1)
        if np.any(outside):
            first = int(np.argmax(outside))
            msg = (
                f"{role} keypoint {first} at {points[first].tolist()} mm "
                "lies outside the domain"
            )
            raise EvaluationError(msg)

    voxels = fixed_pts.points / spacing
    displacement = np.stack(
        [resample(field.vectors[..., axis], voxels) for axis in range(domain.ndim)],
        axis=-1,
    )
    mapped = fixed_pts.points + displacement * spacing
    distances = np.linalg.norm(mapped - moving_pts.points, axis=1)
    return float(distances.mean()), float(distances.std())


def neg_jac_fraction(field: DisplacementField, mask: LabelGrid | None = None) -> float:
    """Share of interior voxels (restricted to mask > 0 if given) with det < 0."""
    det = jacobian_determinant(field).values
    selected = interior_mask(field.domain)
    if mask is not None:
        if mask.labels.shape != field.domain.dims:
            msg = f"Mask dims {mask.labels.shape} do not match field dims {field.domain.dims}"
            raise ShapeError(msg)
        selected &= mask.labels > 0
    count = int(selected.sum())
    if count == 0:
        return 0.0
    return int((det[selected] < 0).sum()) / count


def evaluate_field(field: DisplacementField, case: EvalCase) -> MetricsReport:
    """Compute every metric the case has data for."""
    case.domain.require_same(field.domain, f"field and case {case.name}")
    report = MetricsReport(neg_jac_fraction=neg_jac_fraction(field))
    if case.has_labels:
        warped = warp_labels(case.moving_labels, field)
        labels = sorted(set(case.fixed_labels.foreground) | set(case.moving_labels.foreground))
        scores = {str(label): dice(warped, case.fixed_labels, label) for label in labels}
        report.dice = scores
        report.dice_mean = float(np.mean(list(scores.values()))) if scores else 1.0
    if case.has_keypoints:
        report.tre_mean_mm, report.tre_std_mm = tre(
            case.fixed_keypoints, case.moving_keypoints, field
        )
    return report
