"""Tests for the hypernetwork, amortized loss, training and checkpoints."""

import numpy as np
import pytest
import yaml

from elastireg import autodiff
from elastireg.amortizer import (
    HyperNet,
    MlpModel,
    amortized_loss,
    load_checkpoint,
    mlp_on_tape,
    normalized_coordinates,
    predict_field,
    sample_params,
    save_checkpoint,
    train_amortized,
    weight_count,
)
from elastireg.autodiff import Tape
from elastireg.energy import ElasticityParams, composite_loss_eq5
from elastireg.exceptions import FormatError, ShapeError
from elastireg.grid import GridDomain
from elastireg.phantom import PhantomSpec, make_phantom
from elastireg.registration import OptimizerConfig, register_pair


@pytest.fixture
def tiny_hyper():
    return HyperNet.create(2, seed=1, hyper_hidden=4, target_hidden=(4,))


@pytest.fixture
def pair():
    phantom = make_phantom(PhantomSpec(dims=(16, 16), amplitude=1.0, blob_count=3, seed=5))
    return phantom.fixed, phantom.moving


class TestMlp:
    """Test the coordinate MLP container."""

    def test_weight_count(self):
        assert weight_count(((2, 32), (32, 32), (32, 2))) == 1218

    def test_default_hypernet_size(self):
        hyper = HyperNet.create(2)
        assert hyper.network.layer_shapes == ((2, 32), (32, 1218))
        assert hyper.network.weights.size == 96 + 32 * 1218 + 1218

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            MlpModel(((2, 3), (4, 1)), np.zeros(weight_count(((2, 3), (4, 1)))))
        with pytest.raises(ShapeError):
            MlpModel(((2, 3),), np.zeros(5))

    def test_tape_forward_matches_numpy(self):
        rng = np.random.default_rng(0)
        shapes = ((2, 5), (5, 3))
        model = MlpModel(shapes, rng.normal(size=weight_count(shapes)))
        inputs = rng.normal(size=(7, 2))
        tape = Tape()
        out = mlp_on_tape(shapes, tape.variable(model.weights), tape.constant(inputs))
        assert np.allclose(out.value, model.forward(inputs))
        assert model.activations == ["tanh", "identity"]


class TestHyperNet:
    """Test initialization and prediction."""

    def test_initial_prediction_is_zero(self, tiny_hyper):
        domain = GridDomain.isotropic((8, 6))
        for params in (ElasticityParams(), ElasticityParams(lambda_a=0.4, mu_a=0.5)):
            field = predict_field(tiny_hyper, params, domain)
            assert np.all(field.vectors == 0.0)

    def test_all_zero_weights_predict_zero_field(self, tiny_hyper):
        zero = tiny_hyper.with_weights(np.zeros(tiny_hyper.network.weights.size))
        params = ElasticityParams(lambda_a=0.3, mu_a=0.2)
        field = predict_field(zero, params, GridDomain.isotropic((7, 5)))
        assert np.all(field.vectors == 0.0)

    def test_seeded_initialization(self):
        a = HyperNet.create(3, seed=4, hyper_hidden=4, target_hidden=(4, 4))
        b = HyperNet.create(3, seed=4, hyper_hidden=4, target_hidden=(4, 4))
        assert np.array_equal(a.network.weights, b.network.weights)
        assert a.ndim == 3

    def test_dimension_mismatch(self, tiny_hyper):
        with pytest.raises(ShapeError):
            predict_field(tiny_hyper, ElasticityParams(), GridDomain.isotropic((4, 4, 4)))

    def test_normalized_coordinates_range(self):
        coords = normalized_coordinates(GridDomain.isotropic((5, 3)))
        assert coords.shape == (15, 2)
        assert coords.min() == -1.0
        assert coords.max() == 1.0

    def test_sample_params_feasible_and_seeded(self):
        draws = [sample_params(np.random.default_rng(9)) for _ in range(2)]
        assert draws[0] == draws[1]
        rng = np.random.default_rng(1)
        for _ in range(200):
            params = sample_params(rng)
            assert params.lambda_a + params.mu_a <= 1.0


class TestAmortizedLoss:
    """Test the recorded loss and its weight gradient."""

    def test_matches_direct_loss(self, tiny_hyper, pair):
        rng = np.random.default_rng(2)
        hyper = tiny_hyper.with_weights(
            tiny_hyper.network.weights + 0.1 * rng.normal(size=tiny_hyper.network.weights.size)
        )
        params = ElasticityParams(lambda_a=0.2, mu_a=0.3)
        value, _ = amortized_loss(hyper, hyper.network.weights, pair, params, window=5)
        field = predict_field(hyper, params, pair[0].domain)
        direct = composite_loss_eq5(pair[0], pair[1], field, params, 5)
        assert value == pytest.approx(direct.value, rel=1e-10)

    def test_gradient_matches_finite_differences(self, tiny_hyper, pair):
        rng = np.random.default_rng(2)
        weights = tiny_hyper.network.weights + 0.03 * rng.normal(
            size=tiny_hyper.network.weights.size
        )
        params = ElasticityParams(lambda_a=0.1, mu_a=0.2)
        _, grad = amortized_loss(tiny_hyper, weights, pair, params, window=5)
        floor = 1e-2 * np.max(np.abs(grad))
        h = 1e-6
        for index in rng.choice(weights.size, size=12, replace=False):
            plus = np.array(weights)
            minus = np.array(weights)
            plus[index] += h
            minus[index] -= h
            numeric = (
                amortized_loss(tiny_hyper, plus, pair, params, window=5)[0]
                - amortized_loss(tiny_hyper, minus, pair, params, window=5)[0]
            ) / (2 * h)
            error = abs(grad[index] - numeric) / max(abs(grad[index]), abs(numeric), floor)
            assert error < 2e-3

    def test_sample_primitive_on_tape(self, pair):
        fixed, _ = pair
        tape = Tape()
        coords = tape.variable(np.zeros((3, 2)) + 4.5)
        out = autodiff.sample(fixed.values, coords)
        assert out.shape == (3,)


class TestTraining:
    """Test the training loop and checkpoints."""

    def test_training_reports_every_step(self, tiny_hyper, pair):
        losses = []
        config = OptimizerConfig(learning_rate=1e-3, steps=5)
        trained = train_amortized(
            [pair],
            tiny_hyper,
            config,
            np.random.default_rng(0),
            window=5,
            on_step=lambda step, loss: losses.append((step, loss)),
        )
        assert [step for step, _ in losses] == [0, 1, 2, 3, 4]
        assert not np.array_equal(trained.network.weights, tiny_hyper.network.weights)

    def test_training_is_deterministic(self, tiny_hyper, pair):
        config = OptimizerConfig(learning_rate=1e-3, steps=3)
        a = train_amortized([pair], tiny_hyper, config, np.random.default_rng(3), window=5)
        b = train_amortized([pair], tiny_hyper, config, np.random.default_rng(3), window=5)
        assert np.array_equal(a.network.weights, b.network.weights)

    def test_zero_learning_rate_keeps_weights(self, tiny_hyper, pair):
        rng = np.random.default_rng(4)
        hyper = tiny_hyper.with_weights(
            tiny_hyper.network.weights + 0.1 * rng.normal(size=tiny_hyper.network.weights.size)
        )
        config = OptimizerConfig(learning_rate=0.0, steps=3)
        trained = train_amortized([pair], hyper, config, np.random.default_rng(0), window=5)
        assert np.array_equal(trained.network.weights, hyper.network.weights)

    def test_training_needs_pairs(self, tiny_hyper):
        with pytest.raises(ShapeError):
            train_amortized([], tiny_hyper, OptimizerConfig(), np.random.default_rng(0))

    def test_checkpoint_round_trip(self, tiny_hyper, tmp_path):
        weights = tiny_hyper.network.weights.astype(np.float32).astype(np.float64)
        hyper = tiny_hyper.with_weights(weights)
        path = save_checkpoint(hyper, tmp_path / "model.yaml")
        assert (tmp_path / "model.weights.raw").stat().st_size == weights.size * 4
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.network.weights, weights)
        assert loaded.target_shapes == hyper.target_shapes
        assert loaded.max_displacement == hyper.max_displacement

    def test_checkpoint_truncated_payload(self, tiny_hyper, tmp_path):
        path = save_checkpoint(tiny_hyper, tmp_path / "model.yaml")
        raw = tmp_path / "model.weights.raw"
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_header_named_raw_keeps_its_payload_apart(self, tiny_hyper, tmp_path):
        path = save_checkpoint(tiny_hyper, tmp_path / "model.raw")
        assert (tmp_path / "model.weights.raw").exists()
        loaded = load_checkpoint(path)
        assert loaded.network.layer_shapes == tiny_hyper.network.layer_shapes

    def test_checkpoint_missing_payload(self, tiny_hyper, tmp_path):
        path = save_checkpoint(tiny_hyper, tmp_path / "model.yaml")
        (tmp_path / "model.weights.raw").unlink()
        with pytest.raises(FormatError, match="payload"):
            load_checkpoint(path)

    @pytest.mark.parametrize("key", ["layer_shapes", "payload", "max_displacement"])
    def test_checkpoint_missing_header_key(self, tiny_hyper, tmp_path, key):
        path = save_checkpoint(tiny_hyper, tmp_path / "model.yaml")
        header = yaml.safe_load(path.read_text())
        del header[key]
        path.write_text(yaml.safe_dump(header, sort_keys=False))
        with pytest.raises(FormatError, match="Malformed checkpoint header"):
            load_checkpoint(path)

    def test_checkpoint_wrong_format(self, tmp_path):
        path = tmp_path / "model.yaml"
        path.write_text("format: something-else\n")
        with pytest.raises(FormatError):
            load_checkpoint(path)


@pytest.mark.slow
class TestAmortizationFidelity:
    """A trained hypernetwork approaches per-parameter instance optimization."""

    def test_amortized_loss_close_to_instance_loss(self):
        spec = PhantomSpec(dims=(32, 32), amplitude=2.0, blob_count=4)
        pairs = [
            (p.fixed, p.moving)
            for p in (make_phantom(spec.model_copy(update={"seed": s})) for s in range(4))
        ]
        hyper = HyperNet.create(2, seed=0)
        trained = train_amortized(
            pairs,
            hyper,
            OptimizerConfig(learning_rate=1e-3, steps=2000),
            np.random.default_rng(0),
        )
        held_out = [(0.05, 0.15), (0.2, 0.1), (0.35, 0.25), (0.1, 0.6), (0.45, 0.05)]
        instance = OptimizerConfig(learning_rate=0.05, steps=250)
        for lam, mu in held_out:
            params = ElasticityParams(lambda_a=lam, mu_a=mu)
            amortized = np.mean(
                [
                    composite_loss_eq5(
                        f, m, predict_field(trained, params, f.domain), params
                    ).value
                    for f, m in pairs
                ]
            )
            optimized = np.mean(
                [register_pair(f, m, params, instance).final_terms.loss for f, m in pairs]
            )
            assert amortized == pytest.approx(optimized, rel=0.10)
