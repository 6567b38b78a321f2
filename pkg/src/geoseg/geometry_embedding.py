"""Category-level geometry embedding.

Each class c owns a D x M block A_c that turns point features into M
geometric property activations. Blocks are fitted from entropic
transport plans between a class's reliable points and its property
slots, then folded into the running blocks by momentum; they are never
touched by gradient descent. A trainable (C*M) x C relation matrix maps
the flattened activations back to class logits for two losses: one on
original features and one on features of the adversely augmented copy,
which pulls the augmented geometry toward the clean-class structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from geoseg.autodiff import Var, masked_cross_entropy, matmul, matmul_const, reshape
from geoseg.scenes import LabelSet
from geoseg.sinkhorn import SinkhornConfig, TransportPlan, solve


@dataclass
class EmbeddingMatrix:
    """Per-class geometry blocks, shape (C, D, M); momentum-updated only."""

    blocks: np.ndarray
    epsilon: float = 0.9999
    skipped_zero_updates: int = 0

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim != 3:
            raise ValueError(f"blocks must be (C, D, M), got shape {self.blocks.shape}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")

    @property
    def num_classes(self) -> int:
        return self.blocks.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.blocks.shape[1]

    @property
    def num_properties(self) -> int:
        return self.blocks.shape[2]

    def flat2d(self) -> np.ndarray:
        """(D, C*M) view with columns grouped class-major: block c occupies
        columns c*M .. (c+1)*M."""
        c, d, m = self.blocks.shape
        return self.blocks.transpose(1, 0, 2).reshape(d, c * m)

    @classmethod
    def initial(
        cls,
        num_classes: int,
        feature_dim: int,
        num_properties: int,
        epsilon: float = 0.9999,
        rng: np.random.Generator | None = None,
    ) -> "EmbeddingMatrix":
        """Gaussian bootstrap with every block scaled to unit Frobenius norm."""
        if rng is None:
            rng = np.random.default_rng(0)
        blocks = rng.normal(
            0.0, 1.0 / np.sqrt(feature_dim), size=(num_classes, feature_dim, num_properties)
        )
        norms = np.linalg.norm(blocks.reshape(num_classes, -1), axis=1)
        blocks /= norms[:, None, None]
        return cls(blocks, epsilon=epsilon)


@dataclass
class RelationMatrix:
    """Trainable (C*M, C) map from geometry activations to class logits."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")

    @classmethod
    def initial(
        cls,
        num_classes: int,
        num_properties: int,
        rng: np.random.Generator | None = None,
    ) -> "RelationMatrix":
        if rng is None:
            rng = np.random.default_rng(0)
        cm = num_classes * num_properties
        return cls(rng.normal(0.0, 1.0 / np.sqrt(cm), size=(cm, num_classes)))


def embed(features: np.ndarray, embedding: EmbeddingMatrix) -> np.ndarray:
    """G[n, c, m] = sum_d F[n, d] * A_c[d, m], as a plain array."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    c, _, m = embedding.blocks.shape
    return (features @ embedding.flat2d()).reshape(n, c, m)


def embed_var(features: Var, embedding: EmbeddingMatrix) -> Var:
    """Differentiable embed; the embedding is a constant, gradients reach features only."""
    n = features.value.shape[0]
    c, _, m = embedding.blocks.shape
    flat = matmul_const(features, embedding.flat2d())
    return reshape(flat, (n, c, m))


def class_plan(
    geometry: np.ndarray,
    labels: LabelSet,
    class_id: int,
    cfg: SinkhornConfig = SinkhornConfig(),
    indices: np.ndarray | None = None,
    negate_cost: bool = False,
) -> TransportPlan | None:
    """Transport plan over one class's geometry slice.

    Rows are the class's points (all points labeled class_id, or the
    explicit indices subset), columns the M property slots; the cost is
    the geometry slice itself, optionally negated. Returns None when the
    class has no points.
    """
    if indices is None:
        indices = np.nonzero(labels.labels == class_id)[0]
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return None
    cost = np.asarray(geometry, dtype=np.float64)[indices, class_id, :]
    if negate_cost:
        cost = -cost
    return solve(cost, cfg)


def class_update(
    features: np.ndarray, plan: TransportPlan, reliable: np.ndarray
) -> np.ndarray | None:
    """Fresh block estimate F_reliable^T @ plan, shape (D, M); None if empty."""
    reliable = np.asarray(reliable, dtype=np.int64)
    if reliable.size == 0:
        return None
    if plan.shape[0] != reliable.size:
        raise ValueError(
            f"plan has {plan.shape[0]} rows but {reliable.size} reliable points"
        )
    features = np.asarray(features, dtype=np.float64)
    return features[reliable].T @ plan.plan


def reliable_points(labels: LabelSet, predictions: np.ndarray, class_id: int) -> np.ndarray:
    """Indices where the label and the current prediction agree on class_id."""
    predictions = np.asarray(predictions)
    return np.nonzero((labels.labels == class_id) & (predictions == class_id))[0]


def momentum_update(
    embedding: EmbeddingMatrix,
    updates: Mapping[int, np.ndarray],
    epsilon: float,
) -> EmbeddingMatrix:
    """Fold normalized fresh blocks into the running blocks in place.

    A_c <- epsilon * A_c + (1 - epsilon) * update_c / ||update_c||_F.
    Zero-norm updates are skipped and counted; classes absent from
    updates keep their blocks bit-identical.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    for class_id, update in updates.items():
        update = np.asarray(update, dtype=np.float64)
        if update.shape != embedding.blocks.shape[1:]:
            raise ValueError(
                f"update for class {class_id} has shape {update.shape}, "
                f"expected {embedding.blocks.shape[1:]}"
            )
        norm = float(np.linalg.norm(update))
        if norm == 0.0:
            embedding.skipped_zero_updates += 1
            continue
        if epsilon == 1.0:
            continue
        embedding.blocks[class_id] = (
            epsilon * embedding.blocks[class_id] + (1.0 - epsilon) * (update / norm)
        )
    return embedding


def geometry_property_loss(geometry: Var, relation: Var, labels: LabelSet) -> Var | None:
    """Cross-entropy of softmax(flatten(G) @ Q) against labels.

    Mean over non-ignored points; None when every point is ignored.
    """
    n, c, m = geometry.value.shape
    flat = reshape(geometry, (n, c * m))
    logits = matmul(flat, relation)
    return masked_cross_entropy(logits, labels.labels, labels.ignore_id)


def geometry_consistency_loss(
    features_aug: Var,
    embedding: EmbeddingMatrix,
    relation: Var,
    labels_aug: LabelSet,
) -> Var | None:
    """Property loss on augmented features embedded with the clean-data blocks."""
    geometry = embed_var(features_aug, embedding)
    return geometry_property_loss(geometry, relation, labels_aug)
