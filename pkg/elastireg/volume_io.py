"""RVOL volumes, keypoint CSVs, intensity preprocessing and case manifests.

An RVOL volume is a text header (``name.rvol``, key=value lines) next to a raw
little-endian payload (``name.raw``) stored x-fastest. Displacement fields
interleave their D components per voxel.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator
import yaml

from .exceptions import FormatError, ParameterError
from .grid import DisplacementField, GridDomain, ScalarGrid
from .metrics import EvalCase, KeypointSet, LabelGrid

logger = logging.getLogger(__name__)

RVOL_FORMAT = "RVOL"
RVOL_VERSION = "1"
HEADER_SUFFIX = ".rvol"
PAYLOAD_SUFFIX = ".raw"
DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}
FLOAT_DTYPES = ("float32", "float64")
KEYPOINT_COLUMNS = ("x_mm", "y_mm", "z_mm")
MANIFEST_NAME = "cases.yaml"
DEFAULT_CLIP_LOW = -1100.0
DEFAULT_CLIP_HIGH = 1518.0


def _header_path(path: Path) -> Path:
    path = Path(path)
    return path if path.suffix == HEADER_SUFFIX else path.with_suffix(HEADER_SUFFIX)


def _write_rvol(
    path: Path, domain: GridDomain, data: np.ndarray, dtype: str, components: int
) -> Path:
    """``data`` has shape ``dims`` or ``dims + (components,)``."""
    header = _header_path(path)
    payload = header.with_suffix(PAYLOAD_SUFFIX)
    if components > 1:
        data = np.moveaxis(data, -1, 0)
    flat = np.asarray(data).ravel(order="F").astype(DTYPES[dtype])
    lines = [
        f"format={RVOL_FORMAT}",
        f"version={RVOL_VERSION}",
        "dims=" + ",".join(str(n) for n in domain.dims),
        "spacing=" + ",".join(repr(float(s)) for s in domain.spacing),
        f"dtype={dtype}",
        "order=x-fastest",
        "endian=little",
        f"components={components}",
        f"payload={payload.name}",
    ]
    header.parent.mkdir(parents=True, exist_ok=True)
    header.write_text("\n".join(lines) + "\n")
    payload.write_bytes(flat.tobytes())
    return header


def _parse_header(header: Path) -> dict[str, str]:
    if not header.exists():
        msg = "Volume header not found"
        raise FormatError(msg, path=str(header))
    entries = {}
    for number, line in enumerate(header.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            msg = f"Header line {number} is not key=value: {line!r}"
            raise FormatError(msg, path=str(header))
        entries[key.strip()] = value.strip()
    return entries


def _read_rvol(path: Path) -> tuple[GridDomain, np.ndarray, str, int]:
    header = _header_path(path)
    entries = _parse_header(header)
    missing = [k for k in ("dims", "spacing", "dtype", "components") if k not in entries]
    if missing:
        msg = f"Header is missing {', '.join(missing)}"
        raise FormatError(msg, path=str(header))
    if entries.get("format", RVOL_FORMAT) != RVOL_FORMAT:
        msg = f"Unknown format tag {entries['format']!r}"
        raise FormatError(msg, path=str(header))
    if entries.get("endian", "little") != "little":
        msg = f"Unsupported endianness {entries['endian']!r}; only little is supported"
        raise FormatError(msg, path=str(header))
    if entries.get("order", "x-fastest") != "x-fastest":
        msg = f"Unsupported storage order {entries['order']!r}"
        raise FormatError(msg, path=str(header))
    dtype = entries["dtype"]
    if dtype not in DTYPES:
        msg = f"Unknown dtype {dtype!r} (expected one of {', '.join(DTYPES)})"
        raise FormatError(msg, path=str(header))
    try:
        dims = tuple(int(v) for v in entries["dims"].split(","))
        spacing = tuple(float(v) for v in entries["spacing"].split(","))
        components = int(entries["components"])
        domain = GridDomain(dims=dims, spacing=spacing)
    except (ValueError, ValidationError) as e:
        msg = f"Invalid geometry in header: {e}"
        raise FormatError(msg, path=str(header)) from e

    payload = header.parent / entries.get("payload", header.with_suffix(PAYLOAD_SUFFIX).name)
    if not payload.exists():
        msg = "Volume payload not found"
        raise FormatError(msg, path=str(payload))
    raw = payload.read_bytes()
    expected = domain.voxel_count * components * np.dtype(DTYPES[dtype]).itemsize
    if len(raw) != expected:
        msg = f"Payload length mismatch: expected {expected} bytes, found {len(raw)}"
        raise FormatError(msg, path=str(payload))
    flat = np.frombuffer(raw, dtype=DTYPES[dtype])
    if components > 1:
        data = np.moveaxis(flat.reshape((components, *dims), order="F"), 0, -1)
    else:
        data = flat.reshape(dims, order="F")
    return domain, data, dtype, components


def _check_float_dtype(dtype: str) -> None:
    if dtype not in FLOAT_DTYPES:
        msg = f"Volumes and fields are stored as {' or '.join(FLOAT_DTYPES)}, got {dtype!r}"
        raise ParameterError(msg)


def save_volume(grid: ScalarGrid, path: Path, dtype: str = "float64") -> Path:
    """Write an RVOL scalar volume; ``float32`` halves the payload but rounds values."""
    _check_float_dtype(dtype)
    return _write_rvol(path, grid.domain, grid.values, dtype, 1)


def load_volume(path: Path) -> ScalarGrid:
    domain, data, dtype, components = _read_rvol(path)
    if components != 1 or dtype not in FLOAT_DTYPES:
        msg = f"Expected a float scalar volume, found dtype={dtype} components={components}"
        raise FormatError(msg, path=str(path))
    return ScalarGrid(domain, data.astype(np.float64))


def save_field(field: DisplacementField, path: Path, dtype: str = "float64") -> Path:
    _check_float_dtype(dtype)
    return _write_rvol(path, field.domain, field.vectors, dtype, field.domain.ndim)


def load_field(path: Path) -> DisplacementField:
    domain, data, dtype, components = _read_rvol(path)
    if components != domain.ndim or dtype not in FLOAT_DTYPES:
        msg = (
            f"Expected a float field with {domain.ndim} components, "
            f"found dtype={dtype} components={components}"
        )
        raise FormatError(msg, path=str(path))
    return DisplacementField(domain, data.astype(np.float64))


def save_labels(labels: LabelGrid, path: Path) -> Path:
    return _write_rvol(path, labels.domain, labels.labels, "int32", 1)


def load_labels(path: Path) -> LabelGrid:
    domain, data, dtype, components = _read_rvol(path)
    if components != 1 or dtype != "int32":
        msg = f"Expected an int32 label volume, found dtype={dtype} components={components}"
        raise FormatError(msg, path=str(path))
    return LabelGrid(domain, data.astype(np.int32))


def save_keypoints(points: KeypointSet, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ndim = points.points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(KEYPOINT_COLUMNS[:ndim])
        for row in points.points:
            writer.writerow([repr(float(v)) for v in row])
    return path


def load_keypoints(path: Path) -> KeypointSet:
    """Read a ``x_mm,y_mm[,z_mm]`` CSV into millimeter keypoints."""
    path = Path(path)
    if not path.exists():
        msg = "Keypoint file not found"
        raise FormatError(msg, path=str(path))
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        msg = "Keypoint file is empty"
        raise FormatError(msg, path=str(path))
    header = tuple(cell.strip() for cell in rows[0])
    if header not in (KEYPOINT_COLUMNS[:2], KEYPOINT_COLUMNS):
        msg = f"Unexpected keypoint header {','.join(header)}"
        raise FormatError(msg, path=str(path))
    points = []
    for number, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            msg = f"Row {number} has {len(row)} columns, expected {len(header)}"
            raise FormatError(msg, path=str(path))
        try:
            points.append([float(cell) for cell in row])
        except ValueError as e:
            msg = f"Row {number} is not numeric: {row}"
            raise FormatError(msg, path=str(path)) from e
    if not points:
        msg = "Keypoint file has no points"
        raise FormatError(msg, path=str(path))
    return KeypointSet(np.array(points))


def preprocess(
    grid: ScalarGrid,
    clip_low: float = DEFAULT_CLIP_LOW,
    clip_high: float = DEFAULT_CLIP_HIGH,
) -> ScalarGrid:
    """Clip to [clip_low, clip_high], then map that range linearly onto [0, 1]."""
    if not clip_low < clip_high:
        msg = f"Clip range must satisfy low < high, got ({clip_low}, {clip_high})"
        raise ParameterError(msg)
    clipped = np.clip(grid.values, clip_low, clip_high)
    return ScalarGrid(grid.domain, (clipped - clip_low) / (clip_high - clip_low))


class CaseSpec(BaseModel):
    """One manifest entry; paths are relative to the manifest's directory."""

    name: str
    fixed: Path
    moving: Path
    fixed_labels: Path | None = None
    moving_labels: Path | None = None
    fixed_keypoints: Path | None = None
    moving_keypoints: Path | None = None
    clip_low: float = DEFAULT_CLIP_LOW
    clip_high: float = DEFAULT_CLIP_HIGH
    normalization: Literal["minmax", "none"] = "minmax"

    @model_validator(mode="after")
    def _check_clip(self) -> CaseSpec:
        if not self.clip_low < self.clip_high:
            msg = f"clip_low must be below clip_high, got ({self.clip_low}, {self.clip_high})"
            raise ValueError(msg)
        return self


def load_case(spec: CaseSpec, base_dir: Path | None = None) -> EvalCase:
    base = Path(base_dir) if base_dir else Path()

    def resolve(path: Path | None) -> Path | None:
        return None if path is None else base / path

    fixed = load_volume(resolve(spec.fixed))
    moving = load_volume(resolve(spec.moving))
    if spec.normalization == "minmax":
        fixed = preprocess(fixed, spec.clip_low, spec.clip_high)
        moving = preprocess(moving, spec.clip_low, spec.clip_high)
    return EvalCase(
        name=spec.name,
        fixed=fixed,
        moving=moving,
        fixed_labels=load_labels(resolve(spec.fixed_labels)) if spec.fixed_labels else None,
        moving_labels=load_labels(resolve(spec.moving_labels)) if spec.moving_labels else None,
        fixed_keypoints=(
            load_keypoints(resolve(spec.fixed_keypoints)) if spec.fixed_keypoints else None
        ),
        moving_keypoints=(
            load_keypoints(resolve(spec.moving_keypoints)) if spec.moving_keypoints else None
        ),
    )


def write_manifest(directory: Path, specs: list[CaseSpec]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    data = {"cases": [spec.model_dump(mode="json", exclude_none=True) for spec in specs]}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False)
    return path


def read_manifest(directory: Path) -> list[CaseSpec]:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        msg = "Corpus manifest not found"
        raise FormatError(msg, path=str(path)) from e
    except yaml.YAMLError as e:
        msg = f"Invalid YAML in corpus manifest: {e}"
        raise FormatError(msg, path=str(path)) from e
    try:
        return [CaseSpec(**entry) for entry in data.get("cases", [])]
    except (TypeError, ValidationError) as e:
        msg = f"Invalid case entry: {e}"
        raise FormatError(msg, path=str(path)) from e


def load_corpus(directory: Path) -> list[EvalCase]:
    """Load every case listed in ``<directory>/cases.yaml``."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    cases = [load_case(spec, path.parent) for spec in read_manifest(path)]
    if not cases:
        msg = "Corpus manifest lists no cases"
        raise FormatError(msg, path=str(path))
    logger.info("Loaded %d cases from %s", len(cases), path)
    return cases
