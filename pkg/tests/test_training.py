from dataclasses import replace

import numpy as np
import pytest

from widin.autodiff import Tensor
from widin.core import MLP, Linear, TrainConfig, WidinModel, classify, fit_widin, predict_invariant
from widin.core.bridge import apply_bridge, bridge_embed, train_unimodal_bridge
from widin.core.losses import class_contrastive_loss, feature_loss
from widin.core.params import checksum
from widin.core.training import (
    alignment_loss,
    disentangle_targets,
    train_stage_alignment,
    train_stage_disentangle,
)
from widin.core.wording import TEMPLATE_ORDER, class_rows, pick_templates, text_view, word_image
from widin.errors import ConfigError, ShapeError, StageError
from widin.gradsuite import pipeline_checks
from widin.synthworld import foreign_view, source_train

FAST = TrainConfig(epochs=3, batch=16, seed=5)


@pytest.fixture(scope="module")
def data(small_world):
    split = source_train(small_world, 12)
    return small_world.encoder, split.x, split.y


def fresh(d=16, C=4, seed=0):
    return WidinModel.init(d, C, np.random.default_rng(seed))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.tau, cfg.k, cfg.batch, cfg.epochs) == (0.07, 1.0, 64, 60)
        assert (cfg.lr_align, cfg.lr_disentangle, cfg.feat_weight) == (0.002, 1e-4, 2.0)

    @pytest.mark.parametrize(
        "field,value", [("tau", 0.0), ("k", -1.0), ("batch", 1), ("lr_align", -0.1), ("template", "odd"), ("schedule", "D,PC")]
    )
    def test_invalid_field_named(self, field, value):
        with pytest.raises(ConfigError) as info:
            replace(TrainConfig(), **{field: value}).validate()
        assert info.value.key == field


class TestWording:
    def test_zero_projector_gives_zero_slot(self, rng):
        proj = MLP(Linear.init(16, 16, None), Linear.init(16, 16, None))
        np.testing.assert_array_equal(word_image(proj, rng.normal(size=(5, 16))).data, 0.0)

    @pytest.mark.parametrize("name", ["encode_tokens_slot", "word_image_encode", "stage_a_loss"])
    def test_pipeline_gradients(self, name):
        assert pipeline_checks(0)[name]() < 1e-6

    @pytest.mark.parametrize("strategy", ["fixed", "misaligned", "none", "aggregated", "random"])
    def test_views_have_matching_tables(self, data, strategy):
        enc, x, y = data
        choice = pick_templates(strategy, len(y), np.random.default_rng(0))
        view = text_view(enc, fresh().projector, x, 4, strategy, choice)
        assert view.t_x.shape == x.shape
        covered = np.sort(np.concatenate([idx for idx, _ in view.row_tables]))
        np.testing.assert_array_equal(covered, np.arange(len(y)))
        assert class_rows(view, y).shape == x.shape

    def test_random_view_matches_per_template(self, data):
        enc, x, y = data
        proj = fresh().projector
        choice = pick_templates("random", len(y), np.random.default_rng(1))
        mixed = text_view(enc, proj, x, 4, "random", choice).t_x.data
        for ti, name in enumerate(TEMPLATE_ORDER):
            rows = choice == ti
            fixed = text_view(enc, proj, x[rows], 4, "fixed" if name == "image" else "random", np.full(rows.sum(), ti))
            np.testing.assert_allclose(mixed[rows], fixed.t_x.data, atol=1e-12)

    def test_direct_view_skips_encoder(self, data):
        enc, x, y = data
        proj = fresh().projector
        view = text_view(enc, proj, x, 4, direct=True)
        out = proj(x).data
        np.testing.assert_allclose(view.t_x.data, out / np.linalg.norm(out, axis=1, keepdims=True))


class TestStageA:
    def test_trains_only_projector(self, data):
        enc, x, y = data
        model = fresh()
        before = checksum(model.disentangler, model.classifier)
        enc_sum = enc.checksum()
        proj_sum = checksum(model.projector)
        trace = train_stage_alignment(enc, x, y, 4, FAST, model)
        assert len(trace.epochs) == FAST.epochs
        assert checksum(model.disentangler, model.classifier) == before
        assert checksum(model.projector) != proj_sum
        assert enc.checksum() == enc_sum
        assert model.stage_a_done

    def test_loss_parts_add_up(self, data):
        enc, x, y = data
        total, parts, _ = alignment_loss(enc, fresh().projector, x[:8], y[:8], 4, FAST)
        assert total.item() == pytest.approx(parts["ia"] + parts["ca"], rel=1e-12)

    @pytest.mark.slow
    def test_default_run_lowers_loss(self, world):
        split = source_train(world, 50)
        model = fresh(32, 8, 1)
        trace = train_stage_alignment(world.encoder, split.x, split.y, 8, TrainConfig(seed=1), model)
        series = trace.series("total")
        assert len(series) == 60
        assert series[-1] < series[0]

    def test_joint_schedule_trains_head(self, data):
        enc, x, y = data
        model = fresh()
        before = checksum(model.classifier)
        train_stage_alignment(enc, x, y, 4, replace(FAST, schedule="PC,D"), model)
        assert checksum(model.classifier) != before
        assert "cls" in model.history["align"][0]


class TestStageB:
    def test_requires_stage_a(self, data):
        _, x, y = data
        with pytest.raises(StageError):
            train_stage_disentangle(x, y, x, 4, FAST, fresh())

    def test_first_batch_feature_loss(self, data):
        enc, x, y = data
        model = fresh()
        train_stage_alignment(enc, x, y, 4, FAST, model)
        x_e = disentangle_targets(enc, x, y, 4, FAST, model.projector)
        view = text_view(enc, model.projector, x, 4)
        gap = view.t_x.data - class_rows(view, y)
        expected = 2.0 * np.mean(np.sum((FAST.k * gap) ** 2, axis=1)) / x.shape[1]
        got = feature_loss(predict_invariant(model.disentangler, x), x_e).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_zero_init_classify_is_linear(self, data, rng):
        _, x, _ = data
        model = fresh()
        labels, logits = classify(model, x)
        ref = x @ model.classifier.weight.data + model.classifier.bias.data
        np.testing.assert_array_equal(logits, ref)
        np.testing.assert_array_equal(labels, ref.argmax(axis=1))

    def test_stage_b_leaves_projector(self, data):
        enc, x, y = data
        model = fresh()
        train_stage_alignment(enc, x, y, 4, FAST, model)
        proj = checksum(model.projector)
        train_stage_disentangle(x, y, x, 4, FAST, model)
        assert checksum(model.projector) == proj and model.stage_b_done

    def test_classifier_trained_on_targets(self, data):
        # F_D is irrelevant to F_C's updates: the same run with a perturbed F_D gives the same F_C
        enc, x, y = data
        a, b = fresh(), fresh()
        for m in (a, b):
            train_stage_alignment(enc, x, y, 4, FAST, m)
        b.disentangler.weight.data = b.disentangler.weight.data + 0.5
        x_e = disentangle_targets(enc, x, y, 4, FAST, a.projector)
        train_stage_disentangle(x, y, x_e, 4, FAST, a, train_disentangler=False)
        train_stage_disentangle(x, y, x_e, 4, FAST, b, train_disentangler=False)
        np.testing.assert_array_equal(a.classifier.weight.data, b.classifier.weight.data)

    def test_margins_change_classifier(self, data):
        enc, x, y = data
        keep = np.concatenate([np.flatnonzero(y == c)[: 12 - 3 * c] for c in range(4)])
        xs, ys = x[keep], y[keep]
        plain = fit_widin(enc, xs, ys, 4, FAST)
        adjusted = fit_widin(enc, xs, ys, 4, replace(FAST, margin_scale=1.0))
        assert checksum(plain.classifier) != checksum(adjusted.classifier)
        assert checksum(plain.projector) == checksum(adjusted.projector)


class TestFit:
    def test_deterministic(self, data):
        enc, x, y = data
        a, b = fit_widin(enc, x, y, 4, FAST), fit_widin(enc, x, y, 4, FAST)
        assert checksum(*a.modules().values()) == checksum(*b.modules().values())
        assert a.history["align"] == b.history["align"]

    def test_seed_changes_run(self, data):
        enc, x, y = data
        a, b = fit_widin(enc, x, y, 4, FAST), fit_widin(enc, x, y, 4, replace(FAST, seed=6))
        assert checksum(a.projector) != checksum(b.projector)

    @pytest.mark.parametrize("schedule,stage_b_losses", [("P,DC", {"feat", "cls"}), ("PC,D", {"feat"}), ("PD,C", {"cls"})])
    def test_schedules(self, data, schedule, stage_b_losses):
        enc, x, y = data
        model = fit_widin(enc, x, y, 4, replace(FAST, schedule=schedule))
        assert set(model.history["disentangle"][0]) == stage_b_losses

    def test_invalid_config_rejected(self, data):
        enc, x, y = data
        with pytest.raises(ConfigError):
            fit_widin(enc, x, y, 4, replace(FAST, tau=-1.0))


class TestBridge:
    def test_identity_reduction(self, small_world, rng):
        split = source_train(small_world, 3)
        identity = Linear(Tensor(np.eye(16), requires_grad=True), Tensor(np.zeros((1, 16)), requires_grad=True))
        embedded = bridge_embed(identity, split.x)
        np.testing.assert_allclose(embedded.data, split.x, atol=1e-15)
        a = class_contrastive_loss(embedded, split.y, small_world.class_text).item()
        b = class_contrastive_loss(split.x, split.y, small_world.class_text).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_trains_only_bridge(self, small_world):
        split = source_train(small_world, 8)
        v = foreign_view(small_world, split.x)
        enc_sum = small_world.encoder.checksum()
        table = small_world.class_text.copy()
        bridge, trace = train_unimodal_bridge(v, split.y, small_world.class_text, FAST)
        assert bridge.weight.shape == (20, 16) and len(trace.epochs) == 3
        assert small_world.encoder.checksum() == enc_sum
        np.testing.assert_array_equal(small_world.class_text, table)
        np.testing.assert_allclose(np.linalg.norm(apply_bridge(bridge, v), axis=1), 1.0, atol=1e-12)

    def test_bridge_lowers_loss(self, small_world):
        split = source_train(small_world, 16)
        v = foreign_view(small_world, split.x)
        _, trace = train_unimodal_bridge(v, split.y, small_world.class_text, replace(FAST, epochs=20, lr_bridge=1e-2))
        series = trace.series("bridge")
        assert series[-1] < series[0]

    def test_shape_mismatch(self, small_world):
        split = source_train(small_world, 2)
        with pytest.raises(ShapeError):
            train_unimodal_bridge(
                foreign_view(small_world, split.x),
                split.y,
                small_world.class_text,
                FAST,
                bridge=Linear.init(16, 16, np.random.default_rng(0)),
            )


class TestFeatureStandardization:
    def test_fit_records_training_stats(self, data):
        enc, x, y = data
        model = fit_widin(enc, x, y, 4, FAST)
        np.testing.assert_allclose(model.feature_mean, x.mean(axis=0, keepdims=True))
        np.testing.assert_allclose(model.feature_std, x.std(axis=0, keepdims=True))

    def test_head_is_affine_in_raw_features(self, data, rng):
        _, x, _ = data
        model = fresh()
        model.classifier.bias.data = rng.normal(size=(1, 4))
        model.set_feature_stats(x)
        weight = model.classifier.weight.data / model.feature_std.T
        bias = model.classifier.bias.data - model.feature_mean @ weight
        _, logits = classify(model, x)
        np.testing.assert_allclose(logits, x @ weight + bias, atol=1e-12)

    def test_constant_feature_left_unscaled(self):
        x = np.zeros((5, 16))
        x[:, 0] = np.arange(5.0)
        model = fresh()
        model.set_feature_stats(x)
        assert model.feature_std[0, 1] == 1.0 and model.feature_std[0, 0] > 0


@pytest.mark.slow
def test_trained_bridge_beats_random_zero_shot(world):
    from widin.core.bridge import init_bridge
    from widin.evaluation import zero_shot_eval
    from widin.synthworld import sample_split

    cfg = TrainConfig(seed=1)
    train = source_train(world, 50)
    bridge, _ = train_unimodal_bridge(foreign_view(world, train.x), train.y, world.class_text, cfg)
    random_bridge = init_bridge(world.spec.d_v, world.spec.d, np.random.default_rng([1, 0xB7]))
    held_out = sample_split(world, 0, 50, "test")
    trained, random = (
        zero_shot_eval([replace(held_out, x=apply_bridge(b, foreign_view(world, held_out.x)))] * 2, world.encoder, 8).src
        for b in (bridge, random_bridge)
    )
    assert trained >= random + 30, (trained, random)
