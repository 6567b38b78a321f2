import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geoseg.augment import standard_augment
from geoseg.autodiff import GradientTape
from geoseg.network import BoundModel, predict_logits, seg_loss, sgd_step, softmax
from geoseg.scenes import IGNORE_ID, LabelSet, PointCloud, Scene
from geoseg.streams import substream
from geoseg.synthetic import SynthConfig, default_class_table, make_split
from geoseg.training import (
    TTA_ROTATIONS_DEG,
    TTA_SCALES,
    AblationResult,
    AblationRun,
    TrainConfig,
    ablation_base_config,
    evaluate,
    evaluate_severities,
    init_state,
    run_ablation,
    train,
    train_step,
    tta_predict,
    variant_config,
)

TABLE = default_class_table()


def tiny_cfg(**kwargs) -> TrainConfig:
    base = dict(epochs=2, batch_size=2, lr=0.05, widths=(8, 6), geom_props=3,
                sinkhorn_iters=30, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


def tiny_scenes(n_scenes=4, points=60, seed=0):
    cfg = SynthConfig(points_per_scene=points, seed=seed)
    train_scenes, _ = make_split(cfg, n_scenes, 0)
    return train_scenes


def test_config_builders_map_fields():
    cfg = tiny_cfg(beta1=0.7, sigma=0.3, sinkhorn_iters=11, sinkhorn_tol=1e-6)
    aug = cfg.augmentation()
    assert aug.beta1 == 0.7
    assert aug.seed == cfg.seed
    sink = cfg.sinkhorn()
    assert (sink.sigma, sink.max_iters, sink.tol) == (0.3, 11, 1e-6)


def test_init_state_is_deterministic_per_seed():
    a = init_state(tiny_cfg(), TABLE)
    b = init_state(tiny_cfg(), TABLE)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert pa.tobytes() == pb.tobytes()
    assert a.embedding.blocks.tobytes() == b.embedding.blocks.tobytes()
    assert a.relation.values.tobytes() == b.relation.values.tobytes()
    c = init_state(tiny_cfg(seed=1), TABLE)
    assert a.model.head_weight.tobytes() != c.model.head_weight.tobytes()


def test_degenerate_step_equals_plain_cross_entropy_training():
    """lambda1 = lambda2 = 0 with the adverse gates closed must reproduce a
    hand-written augment/forward/backward/update loop bit for bit."""
    cfg = tiny_cfg(lambda1=0.0, lambda2=0.0, beta1=0.0, beta2=0.0)
    scenes = tiny_scenes(2)

    state = init_state(cfg, TABLE)
    reference = init_state(cfg, TABLE)

    train_step(state, scenes, cfg, epoch=0)

    aug = [
        standard_augment(s, substream(cfg.seed, "std-aug", 0, s.id)) for s in scenes
    ]
    points = np.concatenate([s.cloud.points for s in aug])
    labels = LabelSet(np.concatenate([s.labels.labels for s in aug]))
    tape = GradientTape()
    bound = BoundModel(reference.model, tape)
    _, logits = bound.forward(points)
    loss = seg_loss(logits, labels)
    tape.backward(loss)
    relation_grad = np.zeros_like(reference.relation.values)
    sgd_step(
        reference.sgd,
        reference.model.parameters() + [reference.relation.values],
        bound.gradients() + [relation_grad],
    )

    for got, want in zip(state.model.parameters(), reference.model.parameters()):
        assert_array_equal(got, want)
    assert_array_equal(state.relation.values, reference.relation.values)


def test_step_with_geometry_updates_blocks_and_counts():
    cfg = tiny_cfg()
    scenes = tiny_scenes(2)
    state = init_state(cfg, TABLE)
    before = state.embedding.blocks.copy()
    losses = train_step(state, scenes, cfg, epoch=0)
    assert state.step_count == 1
    assert not losses.skipped
    assert not math.isnan(losses.seg)
    assert not math.isnan(losses.gpl)
    assert not math.isnan(losses.gcl)
    assert losses.total == pytest.approx(losses.seg + losses.gpl + losses.gcl, rel=1e-12)
    assert np.any(state.embedding.blocks != before)


def test_epsilon_one_freezes_blocks_through_training():
    cfg = tiny_cfg(epsilon=1.0)
    scenes = tiny_scenes(3)
    state = init_state(cfg, TABLE)
    frozen = state.embedding.blocks.tobytes()
    for epoch in range(2):
        train_step(state, scenes, cfg, epoch)
    assert state.embedding.blocks.tobytes() == frozen


def test_all_ignored_batch_is_skipped_and_counted():
    cfg = tiny_cfg(lambda1=0.0, lambda2=0.0, beta1=0.0, beta2=0.0)
    pts = np.column_stack([np.eye(3), np.full(3, 0.5)])
    scene = Scene(
        PointCloud(pts), LabelSet(np.full(3, IGNORE_ID, dtype=np.uint16)), "ignored"
    )
    state = init_state(cfg, TABLE)
    before = [p.copy() for p in state.model.parameters()]
    losses = train_step(state, [scene], cfg, epoch=0)
    assert losses.skipped
    assert state.skipped_steps == 1
    for got, want in zip(state.model.parameters(), before):
        assert_array_equal(got, want)


def test_train_loss_sequence_is_bit_reproducible():
    cfg = tiny_cfg(epochs=3)
    scenes = tiny_scenes(4)
    a = train(cfg, scenes, TABLE)
    b = train(cfg, scenes, TABLE)
    assert [s.total for s in a.step_losses] == [s.total for s in b.step_losses]
    assert a.epoch_totals == b.epoch_totals
    for pa, pb in zip(a.state.model.parameters(), b.state.model.parameters()):
        assert pa.tobytes() == pb.tobytes()


def test_train_requires_scenes():
    with pytest.raises(ValueError, match="no training scenes"):
        train(tiny_cfg(), [], TABLE)


def test_train_zero_epochs_returns_initial_state():
    scenes = tiny_scenes(2)
    result = train(tiny_cfg(epochs=0), scenes, TABLE)
    fresh = init_state(tiny_cfg(epochs=0), TABLE)
    for got, want in zip(result.state.model.parameters(), fresh.model.parameters()):
        assert_array_equal(got, want)
    assert result.epoch_losses == []


def test_progress_callback_sees_every_epoch():
    seen = []
    train(tiny_cfg(epochs=2), tiny_scenes(2), TABLE, progress=lambda e, s: seen.append(e))
    assert seen == [0, 1]


# ------------------------------------------------------------------ inference


def test_tta_identity_grid_equals_plain_prediction():
    scenes = tiny_scenes(1)
    state = init_state(tiny_cfg(), TABLE)
    plain = softmax(predict_logits(state.model, scenes[0].cloud.points))
    via_tta = tta_predict(state.model, scenes[0].cloud, (0.0,), (1.0,))
    assert_array_equal(via_tta, plain)


def test_tta_duplicate_transforms_do_not_change_the_mean():
    scenes = tiny_scenes(1)
    state = init_state(tiny_cfg(), TABLE)
    once = tta_predict(state.model, scenes[0].cloud, (0.0, 90.0), (1.0,))
    twice = tta_predict(state.model, scenes[0].cloud, (0.0, 90.0, 0.0, 90.0), (1.0,))
    assert_allclose(twice, once, atol=1e-12)


def test_tta_default_grid_matches_explicit_loop():
    from geoseg.augment import rotate_z

    scenes = tiny_scenes(1)
    state = init_state(tiny_cfg(), TABLE)
    cloud = scenes[0].cloud
    total = np.zeros((cloud.n, TABLE.num_classes))
    for deg in TTA_ROTATIONS_DEG:
        for s in TTA_SCALES:
            pts = rotate_z(cloud.points, math.radians(deg))
            pts[:, :3] *= s
            total += softmax(predict_logits(state.model, pts))
    expected = total / (len(TTA_ROTATIONS_DEG) * len(TTA_SCALES))
    assert_allclose(tta_predict(state.model, cloud), expected, atol=1e-12)


def test_tta_requires_nonempty_grid():
    state = init_state(tiny_cfg(), TABLE)
    with pytest.raises(ValueError):
        tta_predict(state.model, tiny_scenes(1)[0].cloud, (), (1.0,))


def test_evaluate_matches_manual_confusion():
    from geoseg.metrics import MetricsReport, confusion_matrix

    scenes = tiny_scenes(3)
    state = init_state(tiny_cfg(), TABLE)
    report = evaluate(state.model, scenes, TABLE)
    conf = np.zeros((6, 6), dtype=np.int64)
    for scene in scenes:
        preds = np.argmax(predict_logits(state.model, scene.cloud.points), axis=1)
        conf += confusion_matrix(scene.labels.labels, preds, 6, IGNORE_ID)
    expected = MetricsReport.from_confusion(conf)
    assert_array_equal(report.confusion, expected.confusion)
    assert report.miou == expected.miou


def test_evaluate_severities_returns_one_miou_per_condition():
    state = init_state(tiny_cfg(), TABLE)
    out = evaluate_severities(
        state.model, SynthConfig(points_per_scene=60), n_test=2, severities=(0.5, 2.0)
    )
    assert sorted(out) == ["miou_severity_0.5", "miou_severity_2"]
    for value in out.values():
        assert 0.0 <= value <= 1.0 or math.isnan(value)


# ------------------------------------------------------------------- ablation


def test_variant_config_ladder():
    cfg = tiny_cfg(lambda1=1.0, lambda2=1.0)
    assert variant_config(cfg, "baseline").lambda1 == 0.0
    assert variant_config(cfg, "baseline").lambda2 == 0.0
    assert variant_config(cfg, "cge").lambda1 == 1.0
    assert variant_config(cfg, "cge").lambda2 == 0.0
    assert variant_config(cfg, "full") == cfg
    with pytest.raises(ValueError, match="unknown variant"):
        variant_config(cfg, "bogus")


def test_ablation_base_config_diverges_only_where_calibrated():
    base = ablation_base_config()
    default = TrainConfig()
    assert base.lr != default.lr
    assert base.sinkhorn_iters != default.sinkhorn_iters
    assert replace(base, lr=default.lr, sinkhorn_iters=default.sinkhorn_iters) == default


def test_run_ablation_structure_and_means():
    cfg = tiny_cfg(epochs=1)
    synth = SynthConfig(points_per_scene=60)
    result = run_ablation(
        base_cfg=cfg,
        synth_cfg=synth,
        seeds=(0, 1),
        n_train=2,
        n_test=1,
        severity=1.0,
        variants=("baseline", "full"),
        tta_eval=False,
    )
    assert len(result.runs) == 4
    assert result.seeds() == [0, 1]
    by_variant = {v: [r for r in result.runs if r.variant == v] for v in ("baseline", "full")}
    for runs in by_variant.values():
        assert [r.seed for r in runs] == [0, 1]
        for r in runs:
            assert len(r.epoch_totals) == 1
    mean = result.mean_miou("baseline")
    assert mean == pytest.approx(
        np.mean([r.miou for r in by_variant["baseline"]]), abs=1e-12
    )
    lines = result.table_lines()
    assert any(line.startswith("miou_baseline_mean = ") for line in lines)
    assert any(line.startswith("miou_full_seed1 = ") for line in lines)


def test_ablation_result_mean_with_tta_flag():
    runs = [
        AblationRun("full", 0, 0.5, 0.6, [1.0], np.zeros(2)),
        AblationRun("full", 1, 0.3, 0.4, [1.0], np.zeros(2)),
    ]
    result = AblationResult(runs)
    assert result.mean_miou("full") == pytest.approx(0.4)
    assert result.mean_miou("full", tta=True) == pytest.approx(0.5)
