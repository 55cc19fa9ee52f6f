"""Tests for RVOL volumes, keypoint files, preprocessing and manifests."""

import numpy as np
import pytest

from elastireg.exceptions import FormatError, ParameterError
from elastireg.grid import DisplacementField, GridDomain, ScalarGrid
from elastireg.metrics import KeypointSet, LabelGrid
from elastireg.volume_io import (
    CaseSpec,
    load_case,
    load_corpus,
    load_field,
    load_keypoints,
    load_labels,
    load_volume,
    preprocess,
    read_manifest,
    save_field,
    save_keypoints,
    save_labels,
    save_volume,
    write_manifest,
)


@pytest.fixture
def domain():
    return GridDomain(dims=(4, 3, 2), spacing=(1.0, 1.5, 2.0))


def float32_values(rng, shape):
    return rng.normal(size=shape).astype(np.float32).astype(np.float64)


class TestVolumes:
    """Test scalar, label and field volumes."""

    def test_float32_payload_keeps_float32_values(self, domain, tmp_path):
        rng = np.random.default_rng(0)
        grid = ScalarGrid(domain, float32_values(rng, domain.dims))
        loaded = load_volume(save_volume(grid, tmp_path / "img.rvol", dtype="float32"))
        assert loaded.domain == domain
        assert np.array_equal(loaded.values, grid.values)

    def test_float64_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        domain = GridDomain(dims=(8, 8, 8), spacing=(0.7, 1.1, 2.3))
        grid = ScalarGrid(domain, rng.normal(size=domain.dims))
        field = DisplacementField(domain, rng.normal(size=(*domain.dims, 3)) / 3.0)
        loaded_grid = load_volume(save_volume(grid, tmp_path / "img.rvol"))
        loaded_field = load_field(save_field(field, tmp_path / "u.rvol"))
        assert "dtype=float64" in (tmp_path / "img.rvol").read_text()
        assert np.array_equal(loaded_grid.values, grid.values)
        assert np.array_equal(loaded_field.vectors, field.vectors)

    def test_float32_payload_is_opt_in(self, domain, tmp_path):
        rng = np.random.default_rng(0)
        grid = ScalarGrid(domain, rng.normal(size=domain.dims))
        loaded = load_volume(save_volume(grid, tmp_path / "img.rvol", dtype="float32"))
        assert (tmp_path / "img.raw").stat().st_size == domain.voxel_count * 4
        assert np.array_equal(loaded.values, grid.values.astype(np.float32).astype(np.float64))
        with pytest.raises(ParameterError):
            save_volume(grid, tmp_path / "bad.rvol", dtype="int32")

    def test_payload_is_x_fastest(self, tmp_path):
        values = np.arange(6, dtype=np.float64).reshape(3, 2)
        save_volume(ScalarGrid.from_array(values), tmp_path / "img.rvol")
        payload = np.frombuffer((tmp_path / "img.raw").read_bytes(), dtype="<f8")
        assert payload.tolist() == [0.0, 2.0, 4.0, 1.0, 3.0, 5.0]

    def test_header_contents(self, domain, tmp_path):
        save_volume(ScalarGrid.constant(domain, 0.0), tmp_path / "img")
        header = (tmp_path / "img.rvol").read_text()
        assert "dims=4,3,2" in header
        assert "spacing=1.0,1.5,2.0" in header
        assert "order=x-fastest" in header

    def test_field_components_interleaved(self, tmp_path):
        domain = GridDomain.isotropic((2, 1))
        vectors = np.array([[[1.0, 10.0]], [[2.0, 20.0]]])
        save_field(DisplacementField(domain, vectors), tmp_path / "u.rvol")
        payload = np.frombuffer((tmp_path / "u.raw").read_bytes(), dtype="<f8")
        assert payload.tolist() == [1.0, 10.0, 2.0, 20.0]
        assert np.array_equal(load_field(tmp_path / "u.rvol").vectors, vectors)

    def test_labels_round_trip(self, domain, tmp_path):
        labels = np.zeros(domain.dims, dtype=np.int32)
        labels[1, 2, 0] = 7
        loaded = load_labels(save_labels(LabelGrid(domain, labels), tmp_path / "seg.rvol"))
        assert np.array_equal(loaded.labels, labels)

    def test_short_payload_reports_both_lengths(self, domain, tmp_path):
        save_volume(ScalarGrid.constant(domain, 1.0), tmp_path / "img.rvol")
        raw = tmp_path / "img.raw"
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(FormatError) as exc_info:
            load_volume(tmp_path / "img.rvol")
        assert "192" in exc_info.value.message
        assert "191" in exc_info.value.message

    @pytest.mark.parametrize(
        ("old", "new"),
        [("endian=little", "endian=big"), ("dtype=float64", "dtype=float16")],
    )
    def test_unsupported_header_values(self, domain, tmp_path, old, new):
        header = save_volume(ScalarGrid.constant(domain, 1.0), tmp_path / "img.rvol")
        header.write_text(header.read_text().replace(old, new))
        with pytest.raises(FormatError):
            load_volume(header)

    def test_wrong_kind_rejected(self, domain, tmp_path):
        save_labels(LabelGrid(domain, np.zeros(domain.dims, dtype=np.int32)), tmp_path / "seg")
        with pytest.raises(FormatError):
            load_volume(tmp_path / "seg.rvol")
        with pytest.raises(FormatError):
            load_field(tmp_path / "seg.rvol")

    def test_missing_header(self, tmp_path):
        with pytest.raises(FormatError) as exc_info:
            load_volume(tmp_path / "absent.rvol")
        assert exc_info.value.path.endswith("absent.rvol")


class TestKeypoints:
    """Test keypoint CSV files."""

    def test_round_trip(self, tmp_path):
        points = KeypointSet(np.array([[1.5, 2.0, 3.25], [0.0, 4.0, 1.0], [2.0, 2.0, 2.0]]))
        loaded = load_keypoints(save_keypoints(points, tmp_path / "kp.csv"))
        assert len(loaded) == 3
        assert np.array_equal(loaded.points, points.points)
        assert (tmp_path / "kp.csv").read_text().splitlines()[0] == "x_mm,y_mm,z_mm"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "kp.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(FormatError):
            load_keypoints(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "kp.csv"
        path.write_text("x_mm,y_mm\n1,2\n3\n")
        with pytest.raises(FormatError):
            load_keypoints(path)

    def test_no_points(self, tmp_path):
        path = tmp_path / "kp.csv"
        path.write_text("x_mm,y_mm\n")
        with pytest.raises(FormatError):
            load_keypoints(path)


class TestPreprocess:
    """Test intensity clipping and normalization."""

    def test_default_window(self):
        grid = ScalarGrid.from_array(np.array([[-2000.0, -1100.0, 209.0, 1518.0, 3000.0]]))
        values = preprocess(grid).values[0]
        assert values.tolist() == pytest.approx([0.0, 0.0, 0.5, 1.0, 1.0])

    def test_degenerate_range(self):
        with pytest.raises(ParameterError):
            preprocess(ScalarGrid.from_array(np.zeros((3, 3))), 5.0, 5.0)


class TestManifest:
    """Test case manifests and corpus loading."""

    def test_case_with_normalization(self, tmp_path):
        grid = ScalarGrid.from_array(np.full((8, 8), 209.0))
        save_volume(grid, tmp_path / "a" / "fixed.rvol")
        save_volume(grid, tmp_path / "a" / "moving.rvol")
        write_manifest(
            tmp_path, [CaseSpec(name="a", fixed="a/fixed.rvol", moving="a/moving.rvol")]
        )
        specs = read_manifest(tmp_path)
        assert specs[0].normalization == "minmax"
        (case,) = load_corpus(tmp_path)
        assert case.name == "a"
        assert np.allclose(case.fixed.values, 0.5)
        assert not case.has_labels

    def test_unnormalized_case(self, tmp_path):
        grid = ScalarGrid.from_array(np.full((8, 8), 2.0))
        save_volume(grid, tmp_path / "fixed.rvol")
        save_volume(grid, tmp_path / "moving.rvol")
        spec = CaseSpec(name="raw", fixed="fixed.rvol", moving="moving.rvol", normalization="none")
        assert np.all(load_case(spec, tmp_path).moving.values == 2.0)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            read_manifest(tmp_path)

    def test_invalid_entry(self, tmp_path):
        (tmp_path / "cases.yaml").write_text("cases:\n  - name: x\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path)

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "cases.yaml").write_text("cases: []\n")
        with pytest.raises(FormatError):
            load_corpus(tmp_path)
