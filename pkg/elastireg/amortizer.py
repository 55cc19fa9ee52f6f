"""Hypernetwork amortization of the elasticity parameters.

A small hypernetwork maps (lambda_a, mu_a) to the full weight vector of a
coordinate MLP, which maps normalized voxel coordinates to displacements. Both
are trained end to end on the absorbed-weight loss with parameters sampled
per step.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np
import yaml

from . import autodiff
from .autodiff import Tape, Var
from .energy import (
    DEFAULT_NCC_WINDOW,
    ElasticityParams,
    elastic_energy,
    ncc_local,
)
from .exceptions import FormatError, NumericalError, ShapeError
from .grid import DisplacementField, GridDomain, ScalarGrid, voxel_coordinates
from .registration import AdamState, OptimizerConfig, adam_update

logger = logging.getLogger(__name__)

LayerShapes = tuple[tuple[int, int], ...]
ImagePair = tuple[ScalarGrid, ScalarGrid]

CHECKPOINT_FORMAT = "elastireg-hypernet"
CHECKPOINT_VERSION = 1
CHECKPOINT_PAYLOAD_SUFFIX = ".weights.raw"
DEFAULT_MAX_DISPLACEMENT = 5.0


def weight_count(layer_shapes: LayerShapes) -> int:
    return sum(n_in * n_out + n_out for n_in, n_out in layer_shapes)


def _layer_slices(layer_shapes: LayerShapes) -> list[tuple[slice, slice]]:
    """Per layer, the flat slices of the row-major (in, out) matrix and the bias."""
    slices = []
    offset = 0
    for n_in, n_out in layer_shapes:
        w = slice(offset, offset + n_in * n_out)
        offset += n_in * n_out
        b = slice(offset, offset + n_out)
        offset += n_out
        slices.append((w, b))
    return slices


def _glorot(rng: np.random.Generator, layer_shapes: LayerShapes) -> np.ndarray:
    weights = np.zeros(weight_count(layer_shapes))
    for (n_in, n_out), (w, _) in zip(layer_shapes, _layer_slices(layer_shapes), strict=True):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights[w] = rng.uniform(-limit, limit, size=n_in * n_out)
    return weights


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Fully connected network with tanh hidden layers and a linear output."""

    layer_shapes: LayerShapes
    weights: np.ndarray

    def __post_init__(self):
        shapes = tuple((int(a), int(b)) for a, b in self.layer_shapes)
        for (_, n_out), (n_in, _) in zip(shapes, shapes[1:]):
            if n_out != n_in:
                msg = f"Layer shapes do not chain: {shapes}"
                raise ShapeError(msg)
        weights = np.array(self.weights, dtype=np.float64).ravel()
        if weights.size != weight_count(shapes):
            msg = f"Expected {weight_count(shapes)} weights, got {weights.size}"
            raise ShapeError(msg)
        if not np.all(np.isfinite(weights)):
            msg = "MLP weights must be finite"
            raise NumericalError(msg)
        weights.flags.writeable = False
        object.__setattr__(self, "layer_shapes", shapes)
        object.__setattr__(self, "weights", weights)

    @property
    def input_size(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def output_size(self) -> int:
        return self.layer_shapes[-1][1]

    @property
    def activations(self) -> list[str]:
        return ["tanh"] * (len(self.layer_shapes) - 1) + ["identity"]

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of shape (N, input_size)."""
        hidden = np.asarray(inputs, dtype=np.float64)
        last = len(self.layer_shapes) - 1
        for k, ((n_in, n_out), (w, b)) in enumerate(
            zip(self.layer_shapes, _layer_slices(self.layer_shapes), strict=True)
        ):
            hidden = hidden @ self.weights[w].reshape(n_in, n_out) + self.weights[b]
            if k < last:
                hidden = np.tanh(hidden)
        return hidden


def mlp_on_tape(layer_shapes: LayerShapes, weights: Var, inputs: Var) -> Var:
    """Record the MLP forward pass with flat ``weights`` as a tape variable."""
    hidden = inputs
    last = len(layer_shapes) - 1
    for k, ((n_in, n_out), (w, b)) in enumerate(
        zip(layer_shapes, _layer_slices(layer_shapes), strict=True)
    ):
        hidden = hidden @ weights[w].reshape((n_in, n_out)) + weights[b]
        if k < last:
            hidden = autodiff.tanh(hidden)
    return hidden


@dataclass(frozen=True, eq=False)
class HyperNet:
    """Maps (lambda_a, mu_a) to the weight vector of a coordinate MLP."""

    network: MlpModel
    target_shapes: LayerShapes
    max_displacement: float = DEFAULT_MAX_DISPLACEMENT
    seed: int = 0

    def __post_init__(self):
        shapes = tuple((int(a), int(b)) for a, b in self.target_shapes)
        object.__setattr__(self, "target_shapes", shapes)
        if self.network.input_size != 2:
            msg = f"Hypernetwork input size must be 2, got {self.network.input_size}"
            raise ShapeError(msg)
        if self.network.output_size != weight_count(shapes):
            msg = (
                f"Hypernetwork outputs {self.network.output_size} weights, "
                f"target network needs {weight_count(shapes)}"
            )
            raise ShapeError(msg)

    @classmethod
    def create(
        cls,
        ndim: int,
        seed: int = 0,
        hyper_hidden: int = 32,
        target_hidden: Sequence[int] = (32, 32),
        max_displacement: float = DEFAULT_MAX_DISPLACEMENT,
    ) -> HyperNet:
        """Seeded initialization whose initial prediction is the zero field.

        The output layer's weights are zero and its bias holds a Glorot
        initialization of the target network with a zeroed last layer, so the
        target starts with live hidden units but outputs zero everywhere.
        """
        rng = np.random.default_rng(seed)
        sizes = [ndim, *target_hidden, ndim]
        target_shapes = tuple(zip(sizes[:-1], sizes[1:]))
        base = _glorot(rng, target_shapes)
        last_w, last_b = _layer_slices(target_shapes)[-1]
        base[last_w] = 0.0
        base[last_b] = 0.0

        hyper_shapes = ((2, hyper_hidden), (hyper_hidden, weight_count(target_shapes)))
        weights = _glorot(rng, hyper_shapes)
        out_w, out_b = _layer_slices(hyper_shapes)[-1]
        weights[out_w] = 0.0
        weights[out_b] = base
        return cls(MlpModel(hyper_shapes, weights), target_shapes, max_displacement, seed)

    @property
    def ndim(self) -> int:
        return self.target_shapes[0][0]

    def with_weights(self, weights: np.ndarray) -> HyperNet:
        return HyperNet(
            MlpModel(self.network.layer_shapes, weights),
            self.target_shapes,
            self.max_displacement,
            self.seed,
        )

    def target(self, params: ElasticityParams) -> MlpModel:
        raw = self.network.forward(_param_input(params))
        return MlpModel(self.target_shapes, raw[0])


def _param_input(params: ElasticityParams) -> np.ndarray:
    return np.array([[params.lambda_a, params.mu_a]])


def normalized_coordinates(domain: GridDomain) -> np.ndarray:
    """Voxel centers mapped to [-1, 1] per axis, flattened to (N, D)."""
    coords = voxel_coordinates(domain)
    scale = np.array([max(n - 1, 1) for n in domain.dims], dtype=np.float64)
    return (2.0 * coords / scale - 1.0).reshape(-1, domain.ndim)


def predict_field(
    hyper: HyperNet, params: ElasticityParams, domain: GridDomain
) -> DisplacementField:
    """Single forward pass: displacement predicted for ``params`` on ``domain``."""
    if hyper.ndim != domain.ndim:
        msg = f"Model predicts {hyper.ndim}D fields, domain is {domain.ndim}D"
        raise ShapeError(msg)
    out = hyper.target(params).forward(normalized_coordinates(domain))
    vectors = (out * hyper.max_displacement).reshape(*domain.dims, domain.ndim)
    return DisplacementField(domain, vectors)


def sample_params(rng: np.random.Generator) -> ElasticityParams:
    """Draw uniformly from the triangle lambda_a + mu_a <= 1 by rejection."""
    while True:
        lam, mu = rng.random(2)
        if lam + mu <= 1.0:
            return ElasticityParams(lambda_a=float(lam), mu_a=float(mu))


def _absorbed_loss_on_tape(
    fixed: ScalarGrid, warped: Var, displacement: Var, params: ElasticityParams, window: int
) -> Var:
    domain = fixed.domain
    raw = params.as_raw()
    weight = params.similarity_weight

    def forward(warped_values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        ncc = ncc_local(fixed, ScalarGrid(domain, warped_values), window).value
        regularizer = elastic_energy(DisplacementField(domain, vectors), raw).value
        return np.asarray(weight * (1.0 - ncc) + regularizer)

    def vjp(g: np.ndarray, parents: list[np.ndarray], _: np.ndarray) -> tuple[np.ndarray, ...]:
        similarity = ncc_local(fixed, ScalarGrid(domain, parents[0]), window)
        regularizer = elastic_energy(DisplacementField(domain, parents[1]), raw)
        return (
            -g * weight * similarity.gradient.values,
            g * regularizer.gradient.vectors,
        )

    return warped.tape.record("absorbed_loss", (warped, displacement), forward, vjp)


def record_amortized_loss(
    tape: Tape,
    hyper: HyperNet,
    weights: Var,
    pair: ImagePair,
    params: ElasticityParams,
    window: int = DEFAULT_NCC_WINDOW,
) -> Var:
    """Record hypernet -> target MLP -> warp -> loss on ``tape``."""
    fixed, moving = pair
    domain = fixed.domain
    domain.require_same(moving.domain, "fixed and moving images")
    if hyper.ndim != domain.ndim:
        msg = f"Model predicts {hyper.ndim}D fields, domain is {domain.ndim}D"
        raise ShapeError(msg)

    count = weight_count(hyper.target_shapes)
    target = mlp_on_tape(
        hyper.network.layer_shapes, weights, tape.constant(_param_input(params))
    ).reshape((count,))
    out = mlp_on_tape(hyper.target_shapes, target, tape.constant(normalized_coordinates(domain)))
    displacement = (out * hyper.max_displacement).reshape((*domain.dims, domain.ndim))
    warped = autodiff.sample(moving.values, displacement + voxel_coordinates(domain))
    return _absorbed_loss_on_tape(fixed, warped, displacement, params, window)


def amortized_loss(
    hyper: HyperNet,
    weights: np.ndarray,
    pair: ImagePair,
    params: ElasticityParams,
    window: int = DEFAULT_NCC_WINDOW,
) -> tuple[float, np.ndarray]:
    """Loss of the amortized prediction and its gradient w.r.t. the hypernet weights."""
    tape = Tape()
    w = tape.variable(weights)
    loss = record_amortized_loss(tape, hyper, w, pair, params, window)
    (grad,) = autodiff.backprop(tape, loss, [w])
    return float(loss.value), grad


def train_amortized(
    pairs: Sequence[ImagePair],
    hyper: HyperNet,
    config: OptimizerConfig,
    rng: np.random.Generator,
    *,
    window: int = DEFAULT_NCC_WINDOW,
    on_step: Callable[[int, float], None] | None = None,
) -> HyperNet:
    """Train the hypernetwork with one sampled pair and parameter draw per step."""
    if not pairs:
        msg = "Training needs at least one image pair"
        raise ShapeError(msg)
    domain = pairs[0][0].domain
    for fixed, moving in pairs:
        domain.require_same(fixed.domain, "training pairs")
        domain.require_same(moving.domain, "training pairs")

    weights = np.array(hyper.network.weights)
    state = AdamState.zeros(weights.shape)
    for step in range(config.steps):
        pair = pairs[int(rng.integers(len(pairs)))] if len(pairs) > 1 else pairs[0]
        params = sample_params(rng)
        value, grad = amortized_loss(hyper, weights, pair, params, window)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            msg = "Amortized training loss became non-finite"
            raise NumericalError(msg, step=step)
        weights, state = adam_update(weights, grad, state, config)
        if on_step is not None:
            on_step(step, value)
        if step % 100 == 0:
            logger.debug("train step %d loss %.6f", step, value)

    logger.info("Trained hypernetwork for %d steps", config.steps)
    return hyper.with_weights(weights)


def checkpoint_payload_path(path: Path) -> Path:
    """Weights file written next to the header: ``<stem>.weights.raw``."""
    path = Path(path)
    return path.with_name(f"{path.stem}{CHECKPOINT_PAYLOAD_SUFFIX}")


def save_checkpoint(hyper: HyperNet, path: Path) -> Path:
    """Write ``<path>`` (YAML header) and ``<stem>.weights.raw`` (float32 LE weights)."""
    path = Path(path)
    payload = checkpoint_payload_path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_shapes": [list(s) for s in hyper.network.layer_shapes],
        "activations": hyper.network.activations,
        "target_shapes": [list(s) for s in hyper.target_shapes],
        "target_activations": MlpModel(
            hyper.target_shapes, np.zeros(weight_count(hyper.target_shapes))
        ).activations,
        "max_displacement": float(hyper.max_displacement),
        "seed": int(hyper.seed),
        "dtype": "float32",
        "endian": "little",
        "payload": payload.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(header, f, sort_keys=False)
    payload.write_bytes(hyper.network.weights.astype("<f4").tobytes())
    return path


def load_checkpoint(path: Path) -> HyperNet:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            header = yaml.safe_load(f)
    except (OSError, UnicodeDecodeError, yaml.YAMLError) as e:
        msg = f"Cannot read checkpoint header: {e}"
        raise FormatError(msg, path=str(path)) from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        msg = "Not a hypernetwork checkpoint"
        raise FormatError(msg, path=str(path))
    if header.get("dtype") != "float32" or header.get("endian") != "little":
        msg = f"Unsupported payload encoding {header.get('dtype')}/{header.get('endian')}"
        raise FormatError(msg, path=str(path))

    try:
        layer_shapes = tuple(tuple(int(n) for n in s) for s in header["layer_shapes"])
        target_shapes = tuple(tuple(int(n) for n in s) for s in header["target_shapes"])
        max_displacement = float(header["max_displacement"])
        seed = int(header["seed"])
        payload = path.parent / str(header["payload"])
    except (KeyError, TypeError, ValueError) as e:
        msg = f"Malformed checkpoint header: {e!r}"
        raise FormatError(msg, path=str(path)) from e
    try:
        raw = payload.read_bytes()
    except OSError as e:
        msg = f"Cannot read checkpoint payload: {e}"
        raise FormatError(msg, path=str(payload)) from e
    expected = weight_count(layer_shapes) * 4
    if len(raw) != expected:
        msg = f"Checkpoint payload has {len(raw)} bytes, expected {expected}"
        raise FormatError(msg, path=str(payload))
    weights = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    try:
        return HyperNet(MlpModel(layer_shapes, weights), target_shapes, max_displacement, seed)
    except ShapeError as e:
        msg = f"Checkpoint layer shapes are inconsistent: {e}"
        raise FormatError(msg, path=str(path)) from e
