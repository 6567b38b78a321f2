"""Point-wise feature extractor, classifier head, SGD, and checkpoint IO.

Every point is processed independently: the (x, y, z, intensity) input
has its coordinates divided by a fixed scale so they land roughly in
[-1, 1], runs through a small tanh MLP ending in the feature vector, and
an affine head maps features to class logits. All parameters are float64
numpy arrays updated in place by heavy-ball SGD.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from geoseg.autodiff import GradientTape, Var, add_bias, masked_cross_entropy, matmul, tanh
from geoseg.geometry_embedding import EmbeddingMatrix, RelationMatrix
from geoseg.scenes import LabelSet

COORD_SCALE = 50.0

CHECKPOINT_MAGIC = b"GSEG"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(ArithmeticError):
    """A gradient contained NaN or infinity; the update step was aborted."""


class CheckpointFormatError(ValueError):
    """An on-disk checkpoint violates the binary format."""


@dataclass
class PointNetLite:
    """Tanh MLP trunk producing point features, plus a linear class head.

    weights[i] maps width i to width i+1; the last trunk layer output is
    the feature dimension D. Weights are initialized from N(0, 1/fan_in),
    biases start at zero.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray

    @classmethod
    def create(
        cls,
        num_classes: int,
        widths: tuple[int, ...] = (64, 64, 32),
        in_dim: int = 4,
        rng: np.random.Generator | None = None,
    ) -> "PointNetLite":
        if rng is None:
            rng = np.random.default_rng(0)
        dims = (in_dim, *widths)
        weights = [
            rng.normal(0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
            for i in range(len(widths))
        ]
        biases = [np.zeros(dims[i + 1]) for i in range(len(widths))]
        head_weight = rng.normal(0.0, 1.0 / np.sqrt(dims[-1]), size=(dims[-1], num_classes))
        head_bias = np.zeros(num_classes)
        return cls(weights, biases, head_weight, head_bias)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order: (W, b) per layer, then head."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.extend((self.head_weight, self.head_bias))
        return out


class BoundModel:
    """Model parameters wrapped as leaves on one tape.

    Several forward passes through the same BoundModel share parameter
    Vars, so backward accumulates gradients from all of them.
    """

    def __init__(self, model: PointNetLite, tape: GradientTape):
        self.model = model
        self.tape = tape
        self._w = [tape.leaf(w) for w in model.weights]
        self._b = [tape.leaf(b) for b in model.biases]
        self._hw = tape.leaf(model.head_weight)
        self._hb = tape.leaf(model.head_bias)

    def forward(self, points: np.ndarray) -> tuple[Var, Var]:
        """Features and logits for an (N, 4) point array."""
        x = np.array(points, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.model.in_dim:
            raise ValueError(f"expected (N, {self.model.in_dim}) points, got {x.shape}")
        x[:, :3] /= COORD_SCALE
        h = self.tape.leaf(x)
        for w, b in zip(self._w, self._b):
            h = tanh(add_bias(matmul(h, w), b))
        logits = add_bias(matmul(h, self._hw), self._hb)
        return h, logits

    def param_vars(self) -> list[Var]:
        out: list[Var] = []
        for w, b in zip(self._w, self._b):
            out.extend((w, b))
        out.extend((self._hw, self._hb))
        return out

    def gradients(self) -> list[np.ndarray]:
        return [v.grad for v in self.param_vars()]


def predict_logits(model: PointNetLite, points: np.ndarray) -> np.ndarray:
    return BoundModel(model, GradientTape()).forward(points)[1].value


def softmax(z: np.ndarray) -> np.ndarray:
    hi = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - hi)
    return ez / ez.sum(axis=-1, keepdims=True)


def seg_loss(logits: Var, labels: LabelSet) -> Var | None:
    """Mean cross-entropy over non-ignored points; None if all are ignored."""
    return masked_cross_entropy(logits, labels.labels, labels.ignore_id)


@dataclass
class SgdState:
    """Heavy-ball SGD with decoupled-as-written weight decay.

    Per parameter: v <- momentum * v + grad + weight_decay * param, then
    param <- param - lr * v.
    """

    lr: float = 0.24
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocities: list[np.ndarray] | None = field(default=None)


def sgd_step(state: SgdState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place update; raises NonFiniteGradientError before touching params."""
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i}")
    if state.velocities is None:
        state.velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocities):
        v *= state.momentum
        v += g
        v += state.weight_decay * p
        p -= state.lr * v


def save_checkpoint(
    path: str | Path,
    model: PointNetLite,
    relation: RelationMatrix,
    embedding: EmbeddingMatrix,
) -> None:
    """Binary checkpoint: magic, version, dimension header, float64 payload.

    Header uint32s: D, C, M, L (trunk layer count), then the L+1 layer
    widths from input to feature dim. Payload arrays follow in declaration
    order: model parameters, relation values, embedding blocks.
    """
    d = model.feature_dim
    c = model.num_classes
    m = embedding.num_properties
    dims = (model.in_dim, *model.widths)
    header = [d, c, m, len(model.weights), *dims]
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("B", CHECKPOINT_VERSION)
    blob += np.asarray(header, dtype="<u4").tobytes()
    for arr in model.parameters():
        blob += arr.astype("<f8").tobytes()
    blob += relation.values.astype("<f8").tobytes()
    for block in embedding.blocks:
        blob += block.astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


def load_checkpoint(
    path: str | Path, epsilon: float = 0.9999
) -> tuple[PointNetLite, RelationMatrix, EmbeddingMatrix]:
    """Inverse of save_checkpoint; epsilon is not stored and must be supplied."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 5 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    if data[4] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {data[4]}")
    off = 5

    def take_u32(count: int) -> np.ndarray:
        nonlocal off
        end = off + 4 * count
        if end > len(data):
            raise CheckpointFormatError(f"{path}: truncated header at byte {off}")
        out = np.frombuffer(data[off:end], dtype="<u4")
        off = end
        return out

    d, c, m, n_layers = (int(v) for v in take_u32(4))
    dims = [int(v) for v in take_u32(n_layers + 1)]
    if dims[-1] != d:
        raise CheckpointFormatError(f"{path}: feature dim {d} does not match widths {dims}")

    def take_f64(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise CheckpointFormatError(f"{path}: truncated payload at byte {off}")
        out = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
        return out

    weights = []
    biases = []
    for i in range(n_layers):
        weights.append(take_f64((dims[i], dims[i + 1])))
        biases.append(take_f64((dims[i + 1],)))
    head_w = take_f64((d, c))
    head_b = take_f64((c,))
    relation = RelationMatrix(take_f64((c * m, c)))
    blocks = np.stack([take_f64((d, m)) for _ in range(c)])
    if off != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - off} trailing bytes at byte {off}")
    model = PointNetLite(weights, biases, head_w, head_b)
    return model, relation, EmbeddingMatrix(blocks, epsilon=epsilon)
