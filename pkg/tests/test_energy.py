"""Tests for similarity, regularization energies and composite losses."""

import numpy as np
from pydantic import ValidationError
import pytest

from elastireg.energy import (
    ELASTICITY_PRESETS,
    AlphaWeighting,
    ElasticityParams,
    EnergyValue,
    RawElasticity,
    composite_loss_diffusion,
    composite_loss_eq4,
    composite_loss_eq5,
    diffusion_density,
    diffusion_energy,
    elastic_density,
    elastic_energy,
    grad_check,
    ncc_local,
)
from elastireg.exceptions import ParameterError
from elastireg.grid import (
    DisplacementField,
    GridDomain,
    ScalarGrid,
    interior_mask,
    voxel_coordinates,
)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def smooth_image(rng, dims, spacing=None):
    """Random image with some spatial structure so every window has variance."""
    domain = GridDomain(dims=dims, spacing=spacing or (1.0,) * len(dims))
    coords = voxel_coordinates(domain)
    values = rng.random(dims)
    for _ in range(3):
        center = rng.uniform(0, np.array(dims) - 1)
        values += np.exp(-np.sum((coords - center) ** 2, axis=-1) / 8.0)
    return ScalarGrid(domain, values)


def random_field(rng, dims, scale=0.3, spacing=None):
    domain = GridDomain(dims=dims, spacing=spacing or (1.0,) * len(dims))
    return DisplacementField(domain, scale * rng.normal(size=(*dims, len(dims))))


def divergence_free_field(rng, dims):
    """2D field with u_x a function of y only and u_y a function of x only."""
    vectors = np.zeros((*dims, 2))
    vectors[..., 0] = rng.normal(size=dims[1])[None, :]
    vectors[..., 1] = rng.normal(size=dims[0])[:, None]
    return DisplacementField(GridDomain.isotropic(dims), vectors)


class TestElasticityParams:
    """Test parameter models and presets."""

    def test_simplex_constraint(self):
        params = ElasticityParams(lambda_a=0.3, mu_a=0.7)
        assert params.similarity_weight == 0.0
        with pytest.raises(ValidationError):
            ElasticityParams(lambda_a=0.6, mu_a=0.5)
        with pytest.raises(ValidationError):
            ElasticityParams(lambda_a=-0.1, mu_a=0.2)

    def test_similarity_weight(self):
        assert ElasticityParams(lambda_a=0.1, mu_a=0.2).similarity_weight == pytest.approx(0.7)

    def test_presets_scale_keeps_ratio(self):
        soft = ELASTICITY_PRESETS["lung_soft"]
        scaled = soft.scaled(0.1)
        assert scaled.lam == pytest.approx(1.551)
        assert scaled.mu == pytest.approx(0.172)
        assert scaled.ratio == pytest.approx(soft.ratio)

    def test_negative_scale_rejected(self):
        with pytest.raises(ParameterError):
            ELASTICITY_PRESETS["lung_stiff"].scaled(-1.0)

    def test_alpha_range(self):
        with pytest.raises(ValidationError):
            AlphaWeighting(alpha=1.5)
        assert AlphaWeighting(alpha=0.3).elasticity is None


class TestNcc:
    """Test the local normalized cross-correlation."""

    def test_identical_images(self, rng):
        image = smooth_image(rng, (12, 10))
        assert ncc_local(image, image, 5).value == pytest.approx(1.0, abs=1e-10)

    def test_affine_intensity_invariance(self, rng):
        image = smooth_image(rng, (12, 10))
        brighter = ScalarGrid(image.domain, 2.0 * image.values + 3.0)
        assert ncc_local(image, brighter, 5).value == pytest.approx(1.0, abs=1e-10)

    def test_constant_image_counts_as_zero(self, rng):
        image = smooth_image(rng, (10, 10))
        flat = ScalarGrid.constant(image.domain, 0.5)
        result = ncc_local(image, flat, 5)
        assert result.value == 0.0
        assert np.all(result.gradient.values == 0.0)

    def test_symmetric_in_arguments(self, rng):
        a = smooth_image(rng, (9, 8, 7))
        b = smooth_image(rng, (9, 8, 7))
        assert ncc_local(a, b, 5).value == pytest.approx(ncc_local(b, a, 5).value, abs=1e-9)

    def test_window_validation(self, rng):
        image = smooth_image(rng, (8, 8))
        with pytest.raises(ParameterError):
            ncc_local(image, image, 4)
        with pytest.raises(ParameterError):
            ncc_local(image, image, 1)
        with pytest.raises(ParameterError):
            ncc_local(image, image, 9)

    def test_gradient_matches_finite_differences(self, rng):
        fixed = smooth_image(rng, (9, 8))
        moving = smooth_image(rng, (9, 8))
        analytic = ncc_local(fixed, moving, 5).gradient.values
        h = 1e-6
        for index in [(0, 0), (4, 3), (8, 7), (2, 6)]:
            plus = np.array(moving.values)
            minus = np.array(moving.values)
            plus[index] += h
            minus[index] -= h
            numeric = (
                ncc_local(fixed, ScalarGrid(moving.domain, plus), 5).value
                - ncc_local(fixed, ScalarGrid(moving.domain, minus), 5).value
            ) / (2 * h)
            assert analytic[index] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


class TestRegularizers:
    """Test diffusion and linear elastic energies against closed forms."""

    def test_zero_field(self):
        field = DisplacementField.zeros(GridDomain.isotropic((6, 6)))
        assert diffusion_energy(field).value == 0.0
        assert elastic_energy(field, RawElasticity(lam=1.0, mu=1.0)).value == 0.0

    def test_diffusion_density_of_linear_component(self):
        domain = GridDomain.isotropic((8, 8))
        vectors = np.zeros((8, 8, 2))
        vectors[..., 0] = 0.2 * voxel_coordinates(domain)[..., 0]
        density = diffusion_density(DisplacementField(domain, vectors)).values
        assert np.allclose(density[:-1], 0.04)
        assert np.all(density[-1] == 0.0)

    def test_uniform_dilation_density(self):
        domain = GridDomain.isotropic((16, 16, 16))
        field = DisplacementField(domain, 0.1 * voxel_coordinates(domain))
        density = elastic_density(field, RawElasticity(lam=1.0, mu=1.0)).values
        interior = density[interior_mask(domain)]
        assert interior == pytest.approx(np.full(interior.shape, 0.075), rel=0.02)

    def test_rotation_is_elastic_null_space(self):
        domain = GridDomain.isotropic((16, 16))
        coords = voxel_coordinates(domain)
        eps = 1e-3
        vectors = np.stack([-eps * coords[..., 1], eps * coords[..., 0]], axis=-1)
        field = DisplacementField(domain, vectors)
        mask = interior_mask(domain)
        elastic = elastic_density(field, RawElasticity(lam=1.0, mu=1.0)).values[mask].sum()
        diffusion = diffusion_density(field).values[mask].sum()
        assert diffusion > 0
        assert elastic <= 1e-6 * diffusion

    def test_energy_is_mean_of_density(self, rng):
        field = random_field(rng, (6, 5, 4))
        params = RawElasticity(lam=0.7, mu=0.4)
        assert elastic_energy(field, params).value == pytest.approx(
            elastic_density(field, params).values.mean()
        )

    def test_elastic_energy_linear_in_parameters(self, rng):
        field = random_field(rng, (7, 6, 5))
        combined = elastic_energy(field, RawElasticity(lam=0.35, mu=1.7)).value
        lam_only = elastic_energy(field, RawElasticity(lam=1.0, mu=0.0)).value
        mu_only = elastic_energy(field, RawElasticity(lam=0.0, mu=1.0)).value
        assert combined == pytest.approx(0.35 * lam_only + 1.7 * mu_only, rel=1e-12)

    def test_uniform_translation_leaves_energy_unchanged(self, rng):
        field = random_field(rng, (8, 7, 6), spacing=(2.0, 1.5, 1.0))
        shift = np.array([1.25, -3.0, 0.5])
        shifted = DisplacementField(field.domain, field.vectors + shift)
        params = RawElasticity(lam=0.6, mu=0.3)
        assert diffusion_energy(shifted).value == pytest.approx(
            diffusion_energy(field).value, rel=1e-12
        )
        assert elastic_energy(shifted, params).value == pytest.approx(
            elastic_energy(field, params).value, rel=1e-12
        )
        constant = DisplacementField(field.domain, np.broadcast_to(shift, field.vectors.shape))
        assert diffusion_energy(constant).value == 0.0
        assert elastic_energy(constant, params).value == 0.0

    def test_lambda_term_vanishes_on_divergence_free_field(self, rng):
        solenoidal = divergence_free_field(rng, (9, 8))
        assert elastic_energy(solenoidal, RawElasticity(lam=1.0, mu=0.0)).value == 0.0
        assert elastic_energy(solenoidal, RawElasticity(lam=0.0, mu=1.0)).value > 0.0

    def test_lambda_only_energy_depends_on_divergence(self, rng):
        field = random_field(rng, (9, 8))
        solenoidal = divergence_free_field(rng, (9, 8))
        same_divergence = field + solenoidal
        params = RawElasticity(lam=2.0, mu=0.0)
        assert elastic_energy(same_divergence, params).value == pytest.approx(
            elastic_energy(field, params).value, rel=1e-10
        )
        assert diffusion_energy(same_divergence).value != pytest.approx(
            diffusion_energy(field).value, rel=1e-3
        )

    @pytest.mark.parametrize("scale", [0.5, 3.0, -2.0])
    def test_energies_are_quadratic_in_the_field(self, rng, scale):
        field = random_field(rng, (6, 6, 5))
        scaled = field.scaled(scale)
        params = RawElasticity(lam=0.8, mu=0.2)
        assert diffusion_energy(scaled).value == pytest.approx(
            scale**2 * diffusion_energy(field).value, rel=1e-10
        )
        assert elastic_energy(scaled, params).value == pytest.approx(
            scale**2 * elastic_energy(field, params).value, rel=1e-10
        )

    def test_zero_field_gradient_is_exactly_zero(self):
        field = DisplacementField.zeros(GridDomain(dims=(6, 5, 4), spacing=(2.0, 1.5, 1.0)))
        assert np.all(diffusion_energy(field).gradient.vectors == 0.0)
        assert np.all(
            elastic_energy(field, RawElasticity(lam=3.0, mu=0.5)).gradient.vectors == 0.0
        )


class TestCompositeLosses:
    """Test the loss assemblies."""

    def test_eq5_terms(self, rng):
        fixed = smooth_image(rng, (10, 10))
        moving = smooth_image(rng, (10, 10))
        field = random_field(rng, (10, 10))
        params = ElasticityParams(lambda_a=0.2, mu_a=0.3)
        loss = composite_loss_eq5(fixed, moving, field, params, 5)
        terms = loss.terms
        assert terms["similarity_weight"] == pytest.approx(0.5)
        assert terms["regularization_weight"] == 1.0
        expected = 0.5 * (1.0 - terms["similarity"]) + terms["regularization"]
        assert loss.value == pytest.approx(expected)

    def test_eq4_alpha_zero_is_pure_dissimilarity(self, rng):
        fixed = smooth_image(rng, (10, 10))
        field = random_field(rng, (10, 10))
        loss = composite_loss_eq4(fixed, fixed, field, 0.0, ELASTICITY_PRESETS["lung_soft"], 5)
        assert loss.value == pytest.approx(1.0 - loss.terms["similarity"])

    def test_alpha_out_of_range(self, rng):
        fixed = smooth_image(rng, (10, 10))
        field = random_field(rng, (10, 10))
        with pytest.raises(ParameterError):
            composite_loss_eq4(fixed, fixed, field, 1.2, ELASTICITY_PRESETS["lung_soft"], 5)
        with pytest.raises(ParameterError):
            composite_loss_diffusion(fixed, fixed, field, -0.1, 5)

    def test_identical_images_zero_field(self, rng):
        image = smooth_image(rng, (10, 10))
        field = DisplacementField.zeros(image.domain)
        loss = composite_loss_eq5(image, image, field, ElasticityParams(lambda_a=0.1, mu_a=0.1), 5)
        assert loss.value == pytest.approx(0.0, abs=1e-10)


class TestGradientCorrectness:
    """Analytic gradients against central differences."""

    @pytest.mark.parametrize("dims", [(8, 8, 8), (16, 12, 10)])
    def test_regularizers(self, rng, dims):
        field = random_field(rng, dims, spacing=(2.0, 1.5, 1.0))
        params = RawElasticity(lam=0.6, mu=0.3)
        assert grad_check(diffusion_energy, field) < 1e-4
        assert grad_check(lambda u: elastic_energy(u, params), field) < 1e-4

    @pytest.mark.parametrize("dims", [(8, 8, 8), (16, 12, 10)])
    def test_eq5(self, rng, dims):
        fixed = smooth_image(rng, dims)
        moving = smooth_image(rng, dims)
        field = random_field(rng, dims, scale=0.2)
        params = ElasticityParams(lambda_a=0.2, mu_a=0.3)
        error = grad_check(
            lambda u: composite_loss_eq5(fixed, moving, u, params, 5), field, h=1e-5
        )
        assert error < 1e-4

    def test_diffusion_loss(self, rng):
        fixed = smooth_image(rng, (10, 9))
        moving = smooth_image(rng, (10, 9))
        field = random_field(rng, (10, 9), scale=0.2)
        error = grad_check(
            lambda u: composite_loss_diffusion(fixed, moving, u, 0.4, 5), field, h=1e-5
        )
        assert error < 1e-4

    @pytest.mark.parametrize("dims", [(8, 8, 8), (16, 12, 10)])
    def test_ncc_dissimilarity(self, rng, dims):
        spacing = (2.0, 1.5, 1.0)
        fixed = smooth_image(rng, dims, spacing)
        moving = smooth_image(rng, dims, spacing)
        field = random_field(rng, dims, scale=0.2, spacing=spacing)
        error = grad_check(
            lambda u: composite_loss_eq5(fixed, moving, u, ElasticityParams(), 5), field, h=1e-5
        )
        assert error < 1e-4

    def test_bias_on_near_zero_component_is_reported(self, rng):
        field = random_field(rng, (4, 4), scale=0.01)
        vectors = np.array(field.vectors)
        vectors[2, 1, 0] = 0.0
        field = DisplacementField(field.domain, vectors)

        def squared_norm(bias):
            def energy(u):
                gradient = np.array(u.vectors)
                gradient[2, 1, 0] += bias
                return EnergyValue(
                    value=0.5 * float(np.sum(u.vectors**2)),
                    gradient=DisplacementField(u.domain, gradient),
                )

            return energy

        assert grad_check(squared_norm(0.0), field, samples=64) < 1e-4
        assert grad_check(squared_norm(1e-9), field, samples=64) > 0.5

    def test_step_must_be_positive(self, rng):
        field = random_field(rng, (4, 4))
        with pytest.raises(ParameterError):
            grad_check(diffusion_energy, field, h=0.0)
