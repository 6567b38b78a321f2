"""Training harness: step logic, loops, evaluation, and the ablation battery.

One train step follows a fixed order so that runs are bit-reproducible:

  1. standard augmentation per scene      (stream "std-aug", epoch, scene id)
  2. forward on the augmented originals
  3. segmentation cross-entropy
  4. geometry embedding + property loss
  5. adverse compound augmentation        (stream "pags", epoch, scene id)
     + forward + consistency loss
  6. backward, SGD update of model and relation matrix
  7. momentum update of the per-class geometry blocks from reliable points

Scenes of a batch are concatenated, so every loss is a mean over all
points of the batch jointly. The embedding blocks are built from
original (non-augmented) features and receive no gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from geoseg.augment import (
    AugmentationConfig,
    compound_augment,
    rotate_z,
    standard_augment,
)
from geoseg.autodiff import GradientTape, Var, add, scale
from geoseg.geometry_embedding import (
    EmbeddingMatrix,
    RelationMatrix,
    class_plan,
    class_update,
    embed,
    embed_var,
    geometry_consistency_loss,
    geometry_property_loss,
    momentum_update,
    reliable_points,
)
from geoseg.metrics import MetricsReport, confusion_matrix
from geoseg.network import (
    BoundModel,
    PointNetLite,
    SgdState,
    predict_logits,
    seg_loss,
    sgd_step,
    softmax,
)
from geoseg.scenes import ClassTable, LabelSet, PointCloud, Scene
from geoseg.sinkhorn import SinkhornConfig
from geoseg.streams import substream
from geoseg.synthetic import SynthConfig, generate_scene, make_split, shift_scene

TTA_ROTATIONS_DEG = (0.0, 90.0, 180.0, 270.0)
TTA_SCALES = (0.95, 1.0, 1.05)

EVAL_SEVERITIES = (0.5, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; every field doubles as a config-file key."""

    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.24
    momentum: float = 0.9
    weight_decay: float = 1e-4
    widths: tuple[int, ...] = (64, 64, 32)
    geom_props: int = 8
    epsilon: float = 0.9999
    sigma: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-8
    negate_plan_cost: bool = False
    lambda1: float = 1.0
    lambda2: float = 1.0
    seg_on_augmented: bool = False
    beta1: float = 0.3
    beta2: float = 0.5
    rho: float = 0.3
    h1: float = 0.05
    h2: float = 0.3
    gamma1: float = 0.3
    gamma2: float = 1.0
    fog_alpha_max: float = 0.1
    fog_threshold: float = 0.05
    accumulate_all: bool = False
    seed: int = 0
    out_dir: str = "runs/default"

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(
            beta1=self.beta1,
            beta2=self.beta2,
            rho=self.rho,
            h1=self.h1,
            h2=self.h2,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            fog_alpha_max=self.fog_alpha_max,
            fog_threshold=self.fog_threshold,
            seed=self.seed,
            accumulate_all=self.accumulate_all,
        )

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(
            sigma=self.sigma, max_iters=self.sinkhorn_iters, tol=self.sinkhorn_tol
        )


@dataclass
class TrainState:
    model: PointNetLite
    embedding: EmbeddingMatrix
    relation: RelationMatrix
    sgd: SgdState
    table: ClassTable
    step_count: int = 0
    skipped_steps: int = 0


@dataclass
class StepLosses:
    """Loss values of one step; NaN marks a component that had no valid points."""

    seg: float
    gpl: float
    gcl: float
    total: float
    skipped: bool = False


def init_state(cfg: TrainConfig, table: ClassTable) -> TrainState:
    model = PointNetLite.create(
        table.num_classes, cfg.widths, rng=substream(cfg.seed, "init-model")
    )
    embedding = EmbeddingMatrix.initial(
        table.num_classes,
        model.feature_dim,
        cfg.geom_props,
        epsilon=cfg.epsilon,
        rng=substream(cfg.seed, "init-embedding"),
    )
    relation = RelationMatrix.initial(
        table.num_classes, cfg.geom_props, rng=substream(cfg.seed, "init-relation")
    )
    sgd = SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return TrainState(model, embedding, relation, sgd, table)


def _concat(scenes: list[Scene], ignore_id: int) -> tuple[np.ndarray, LabelSet]:
    if scenes:
        points = np.concatenate([s.cloud.points for s in scenes], axis=0)
        labels = np.concatenate([s.labels.labels for s in scenes])
    else:
        points = np.empty((0, 4))
        labels = np.empty(0, dtype=np.uint16)
    return points, LabelSet(labels, ignore_id)


def train_step(
    state: TrainState, batch: list[Scene], cfg: TrainConfig, epoch: int
) -> StepLosses:
    """One optimization step over a batch of scenes."""
    table = state.table
    ignore_id = batch[0].labels.ignore_id if batch else 0xFFFF
    aug_cfg = cfg.augmentation()
    use_geometry = cfg.lambda1 > 0 or cfg.lambda2 > 0
    use_adverse = cfg.lambda2 > 0 or cfg.seg_on_augmented

    originals = [
        standard_augment(s, substream(cfg.seed, "std-aug", epoch, s.id)) for s in batch
    ]
    points, labels = _concat(originals, ignore_id)

    tape = GradientTape()
    bound = BoundModel(state.model, tape)
    relation_var = tape.leaf(state.relation.values)
    features, logits = bound.forward(points)

    seg = seg_loss(logits, labels)

    geometry_values = None
    gpl = None
    if cfg.lambda1 > 0:
        geometry = embed_var(features, state.embedding)
        geometry_values = geometry.value
        gpl = geometry_property_loss(geometry, relation_var, labels)

    gcl = None
    seg_aug = None
    if use_adverse:
        adverse = [
            compound_augment(s, table, aug_cfg, substream(cfg.seed, "pags", epoch, s.id))[0]
            for s in originals
        ]
        points_aug, labels_aug = _concat(adverse, ignore_id)
        features_aug, logits_aug = bound.forward(points_aug)
        if cfg.lambda2 > 0:
            gcl = geometry_consistency_loss(
                features_aug, state.embedding, relation_var, labels_aug
            )
        if cfg.seg_on_augmented:
            seg_aug = seg_loss(logits_aug, labels_aug)

    parts: list[Var] = []
    if seg is not None:
        parts.append(seg)
    if seg_aug is not None:
        parts.append(seg_aug)
    if gpl is not None:
        parts.append(scale(gpl, cfg.lambda1))
    if gcl is not None:
        parts.append(scale(gcl, cfg.lambda2))

    def val(v: Var | None) -> float:
        return float(v.value) if v is not None else math.nan

    if not parts:
        state.skipped_steps += 1
        state.step_count += 1
        return StepLosses(math.nan, math.nan, math.nan, math.nan, skipped=True)

    total = parts[0]
    for part in parts[1:]:
        total = add(total, part)
    tape.backward(total)

    params = state.model.parameters() + [state.relation.values]
    grads = bound.gradients() + [relation_var.grad]
    sgd_step(state.sgd, params, grads)

    if use_geometry and labels.n:
        if geometry_values is None:
            geometry_values = embed(features.value, state.embedding)
        predictions = np.argmax(logits.value, axis=1)
        raw = labels.labels
        present = np.unique(raw[raw != ignore_id])
        updates = {}
        sink_cfg = cfg.sinkhorn()
        for class_id in present:
            class_id = int(class_id)
            if state.step_count == 0:
                # No trustworthy predictions yet; every labeled point counts.
                rel = np.nonzero(raw == class_id)[0]
            else:
                rel = reliable_points(labels, predictions, class_id)
            if rel.size == 0:
                continue
            plan = class_plan(
                geometry_values,
                labels,
                class_id,
                sink_cfg,
                indices=rel,
                negate_cost=cfg.negate_plan_cost,
            )
            update = class_update(features.value, plan, rel)
            if update is not None:
                updates[class_id] = update
        if updates:
            momentum_update(state.embedding, updates, cfg.epsilon)

    state.step_count += 1
    return StepLosses(val(seg), val(gpl), val(gcl), float(total.value))


@dataclass
class TrainResult:
    state: TrainState
    epoch_losses: list[dict[str, float]]
    step_losses: list[StepLosses]

    @property
    def epoch_totals(self) -> list[float]:
        return [e["total"] for e in self.epoch_losses]


def _component_mean(values: list[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def train(
    cfg: TrainConfig,
    scenes: list[Scene],
    table: ClassTable,
    progress=None,
) -> TrainResult:
    """Train a fresh state on the given scenes; progress(epoch, losses) if given."""
    if not scenes:
        raise ValueError("no training scenes")
    state = init_state(cfg, table)
    epoch_losses: list[dict[str, float]] = []
    step_losses: list[StepLosses] = []
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "order", epoch).permutation(len(scenes))
        epoch_steps: list[StepLosses] = []
        for start in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
            sl = train_step(state, batch, cfg, epoch)
            epoch_steps.append(sl)
        summary = {
            "seg": _component_mean([s.seg for s in epoch_steps]),
            "gpl": _component_mean([s.gpl for s in epoch_steps]),
            "gcl": _component_mean([s.gcl for s in epoch_steps]),
            "total": _component_mean([s.total for s in epoch_steps]),
        }
        epoch_losses.append(summary)
        step_losses.extend(epoch_steps)
        if progress is not None:
            progress(epoch, summary)
    return TrainResult(state, epoch_losses, step_losses)


def tta_predict(
    model: PointNetLite,
    cloud: PointCloud,
    rotations_deg: tuple[float, ...] = TTA_ROTATIONS_DEG,
    scales: tuple[float, ...] = TTA_SCALES,
) -> np.ndarray:
    """Mean softmax probabilities over the rotation x scale transform grid."""
    if not rotations_deg or not scales:
        raise ValueError("need at least one rotation and one scale")
    total = None
    count = 0
    for deg in rotations_deg:
        for s in scales:
            pts = rotate_z(cloud.points, math.radians(deg))
            pts[:, :3] *= s
            probs = softmax(predict_logits(model, pts))
            total = probs if total is None else total + probs
            count += 1
    return total / count


def evaluate(
    model: PointNetLite,
    scenes: list[Scene],
    table: ClassTable,
    tta: bool = False,
    rotations_deg: tuple[float, ...] = TTA_ROTATIONS_DEG,
    scales: tuple[float, ...] = TTA_SCALES,
) -> MetricsReport:
    """Confusion-matrix evaluation over scenes, optionally with test-time augmentation."""
    c = table.num_classes
    conf = np.zeros((c, c), dtype=np.int64)
    for scene in scenes:
        if tta:
            probs = tta_predict(model, scene.cloud, rotations_deg, scales)
            preds = np.argmax(probs, axis=1)
        else:
            preds = np.argmax(predict_logits(model, scene.cloud.points), axis=1)
        conf += confusion_matrix(scene.labels.labels, preds, c, scene.labels.ignore_id)
    return MetricsReport.from_confusion(conf)


def evaluate_severities(
    model: PointNetLite,
    synth_cfg: SynthConfig,
    n_test: int,
    severities: tuple[float, ...] = EVAL_SEVERITIES,
    aug: AugmentationConfig | None = None,
    tta: bool = False,
) -> dict[str, float]:
    """mIoU of freshly generated shifted test sets at several severities."""
    if aug is None:
        aug = AugmentationConfig()
    out = {}
    for severity in severities:
        cfg_s = replace(synth_cfg, shift_severity=severity)
        scenes = []
        for j in range(n_test):
            scene = generate_scene(cfg_s, 1_000_000 + j)
            scenes.append(shift_scene(scene, cfg_s, aug, j))
        report = evaluate(model, scenes, synth_cfg.classes, tta=tta)
        out[f"miou_severity_{severity:g}"] = report.miou
    return out


VARIANTS = ("baseline", "cge", "full")


def ablation_base_config() -> TrainConfig:
    """Optimizer settings calibrated for the desk-scale ablation battery.

    The point-wise MLP wants a smaller step than the library default, and
    plans refreshed every step tolerate a lower solver iteration cap.
    """
    return TrainConfig(lr=0.05, sinkhorn_iters=50)


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """baseline: segmentation loss only; cge: adds the property loss;
    full: adds adverse augmentation with the consistency loss."""
    if variant == "baseline":
        return replace(cfg, lambda1=0.0, lambda2=0.0)
    if variant == "cge":
        return replace(cfg, lambda2=0.0)
    if variant == "full":
        return cfg
    raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


@dataclass
class AblationRun:
    variant: str
    seed: int
    miou: float
    tta_miou: float
    epoch_totals: list[float]
    per_class_iou: np.ndarray


@dataclass
class AblationResult:
    runs: list[AblationRun]

    def mean_miou(self, variant: str, tta: bool = False) -> float:
        vals = [
            (r.tta_miou if tta else r.miou) for r in self.runs if r.variant == variant
        ]
        return float(np.mean(vals)) if vals else math.nan

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    def table_lines(self) -> list[str]:
        """Structured text summary, one `name = value` per line."""
        out = []
        for variant in VARIANTS:
            for r in self.runs:
                if r.variant == variant:
                    out.append(f"miou_{variant}_seed{r.seed} = {r.miou:.6f}")
            out.append(f"miou_{variant}_mean = {self.mean_miou(variant):.6f}")
            out.append(f"miou_{variant}_tta_mean = {self.mean_miou(variant, tta=True):.6f}")
        return out


def run_ablation(
    base_cfg: TrainConfig | None = None,
    synth_cfg: SynthConfig | None = None,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    n_train: int = 200,
    n_test: int = 50,
    severity: float = 1.5,
    variants: tuple[str, ...] = VARIANTS,
    tta_eval: bool = True,
    progress=None,
) -> AblationResult:
    """Train the component ladder per seed on a shared shifted split.

    Every variant of a seed sees identical data and identical named RNG
    substreams; the variants differ only in which losses are active.
    """
    if base_cfg is None:
        base_cfg = ablation_base_config()
    if synth_cfg is None:
        synth_cfg = SynthConfig()
    runs: list[AblationRun] = []
    for seed in seeds:
        scfg = replace(synth_cfg, seed=seed, shift_severity=severity)
        train_scenes, test_scenes = make_split(scfg, n_train, n_test)
        for variant in variants:
            cfg = variant_config(replace(base_cfg, seed=seed), variant)
            result = train(cfg, train_scenes, scfg.classes)
            report = evaluate(result.state.model, test_scenes, scfg.classes)
            tta_miou = (
                evaluate(result.state.model, test_scenes, scfg.classes, tta=True).miou
                if tta_eval
                else math.nan
            )
            runs.append(
                AblationRun(
                    variant,
                    seed,
                    report.miou,
                    tta_miou,
                    [e["total"] for e in result.epoch_losses],
                    report.per_class_iou,
                )
            )
            if progress is not None:
                progress(runs[-1])
    return AblationResult(runs)
