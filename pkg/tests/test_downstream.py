import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelpair.backbone import PyramidConfig, build_model
from voxelpair.checkpoint import save_checkpoint, stable_parameter_names
from voxelpair.downstream import (
    DiceResult,
    DownstreamConfig,
    FinetuneSchedule,
    LinearHead,
    NonlinearHead,
    aggregate_dice,
    dice_score,
    evaluate_protocol,
    finetune,
    fold_assignments,
    linear_eval_forward,
    predict_labels,
    train_linear_probe,
)
from voxelpair.volio import generate_synthetic_volume

MICRO = PyramidConfig(num_scales=2, base_channels=4, proj_channels=4, embed_dim=8)
PATCH = (16, 16, 16)


@pytest.fixture(scope="module")
def labeled_cases():
    return [generate_synthetic_volume(s, (32, 32, 32), 3) for s in range(3)]


def brute_force_dice(pred, true, c):
    """Oracle: explicit voxel-coordinate sets."""
    p = {tuple(v) for v in np.argwhere(pred == c)}
    t = {tuple(v) for v in np.argwhere(true == c)}
    if not p and not t:
        return None
    return 2 * len(p & t) / (len(p) + len(t))


class TestFinetuneSchedule:
    def test_frozen_then_ramp_endpoints_exact(self):
        sched = FinetuneSchedule(freeze_steps=100, ramp_steps=50)
        for step in range(1, 101):
            assert sched.backbone_lr(step) == 0.0
        assert sched.backbone_lr(101) == 3e-5  # ramp step 0
        assert sched.backbone_lr(101 + 50) == 3e-4  # ramp completion
        assert sched.backbone_lr(500) == 3e-4

    def test_midpoint_is_geometric_mean(self):
        sched = FinetuneSchedule(freeze_steps=0, ramp_steps=100)
        mid = sched.ramp_lr(50)
        assert abs(mid - math.sqrt(3e-5 * 3e-4)) < 1e-12
        assert abs(mid - 9.4868_3298e-5) < 1e-9

    def test_ramp_monotone_non_decreasing(self):
        sched = FinetuneSchedule(freeze_steps=10, ramp_steps=37)
        values = [sched.backbone_lr(s) for s in range(1, 60)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_closed_form_matches_spec_formula(self):
        sched = FinetuneSchedule(freeze_steps=0, ramp_steps=1200)
        for t in (1, 7, 600, 1199):
            expected = 3e-5 * (3e-4 / 3e-5) ** (t / 1200)
            assert sched.ramp_lr(t) == expected

    def test_validation(self):
        with pytest.raises(ValueError):
            FinetuneSchedule(ramp_steps=0)
        with pytest.raises(ValueError):
            FinetuneSchedule(lr_head=0.0)


class TestLinearEval:
    def test_logit_grid_shape(self):
        model = build_model(MICRO, seed=0)
        head = LinearHead(MICRO.level_channels, num_classes=3)
        patch = np.random.default_rng(0).random(PATCH, dtype=np.float32)
        logits = linear_eval_forward(model, head, patch)
        assert logits.shape == (3, *PATCH)

    def test_zero_initialized_head_gives_zero_logits(self):
        model = build_model(MICRO, seed=0)
        head = LinearHead(MICRO.level_channels, num_classes=3)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        patch = np.random.default_rng(1).random(PATCH, dtype=np.float32)
        logits = linear_eval_forward(model, head, patch)
        assert torch.equal(logits, torch.zeros_like(logits))

    def test_no_gradient_reaches_backbone(self):
        model = build_model(MICRO, seed=0)
        head = LinearHead(MICRO.level_channels, num_classes=3)
        patch = np.random.default_rng(2).random(PATCH, dtype=np.float32)
        loss = linear_eval_forward(model, head, patch).square().mean()
        loss.backward()
        assert all(p.grad is None for p in model.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in head.parameters())

    def test_probe_training_leaves_backbone_bitwise_unchanged(self, labeled_cases):
        model = build_model(MICRO, seed=0)
        before = {k: v.clone() for k, v in stable_parameter_names(model).items()}
        train_linear_probe(
            model, labeled_cases, 3, PATCH, DownstreamConfig(steps=3, patches_per_step=1)
        )
        after = stable_parameter_names(model)
        assert all(torch.equal(before[k], after[k]) for k in before)


class TestFinetune:
    def test_backbone_frozen_for_freeze_steps(self, labeled_cases):
        model = build_model(MICRO, seed=1)
        before = {k: v.clone() for k, v in stable_parameter_names(model).items()}
        sched = FinetuneSchedule(freeze_steps=3, ramp_steps=2)
        finetune(
            model, labeled_cases, 3, PATCH, DownstreamConfig(steps=3, patches_per_step=1), sched
        )
        after = stable_parameter_names(model)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_backbone_moves_after_ramp_begins(self, labeled_cases):
        model = build_model(MICRO, seed=1)
        before = {k: v.clone() for k, v in stable_parameter_names(model).items()}
        sched = FinetuneSchedule(freeze_steps=2, ramp_steps=2)
        finetune(
            model, labeled_cases, 3, PATCH, DownstreamConfig(steps=6, patches_per_step=1), sched
        )
        after = stable_parameter_names(model)
        assert any(not torch.equal(before[k], after[k]) for k in before)

    def test_scratch_mode_trains_jointly_from_step_one(self, labeled_cases):
        model = build_model(MICRO, seed=2)
        before = {k: v.clone() for k, v in stable_parameter_names(model).items()}
        finetune(
            model, labeled_cases, 3, PATCH, DownstreamConfig(steps=2, patches_per_step=1), None
        )
        after = stable_parameter_names(model)
        assert any(not torch.equal(before[k], after[k]) for k in before)


class TestDice:
    def test_identical_masks_score_one(self):
        labels = np.random.default_rng(0).integers(0, 4, (10, 10, 10)).astype(np.uint8)
        result = dice_score(labels, labels, 4)
        assert set(result.per_class) == {1, 2, 3}
        assert all(v == 1.0 for v in result.per_class.values())
        assert result.overall == 1.0

    def test_disjoint_masks_score_zero(self):
        a = np.zeros((6, 6, 6), dtype=np.uint8)
        b = np.zeros((6, 6, 6), dtype=np.uint8)
        a[:3] = 1
        b[3:] = 1
        result = dice_score(a, b, 2)
        assert result.per_class[1] == 0.0 and result.overall == 0.0

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_matches_set_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 4, (6, 6, 6)).astype(np.uint8)
        true = rng.integers(0, 4, (6, 6, 6)).astype(np.uint8)
        result = dice_score(pred, true, 4)
        for c in range(1, 4):
            oracle = brute_force_dice(pred, true, c)
            if oracle is None:
                assert c not in result.per_class
            else:
                assert abs(result.per_class[c] - oracle) < 1e-12

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 3, (5, 5, 5)).astype(np.uint8)
        true = rng.integers(0, 3, (5, 5, 5)).astype(np.uint8)
        ab = dice_score(pred, true, 3)
        ba = dice_score(true, pred, 3)
        assert ab.per_class == ba.per_class
        assert all(0.0 <= v <= 1.0 for v in ab.per_class.values())

    def test_absent_class_excluded_from_overall(self):
        pred = np.zeros((4, 4, 4), dtype=np.uint8)
        true = np.zeros((4, 4, 4), dtype=np.uint8)
        pred[0, 0, 0] = 1
        true[0, 0, :2] = 1
        result = dice_score(pred, true, 3)  # class 2 absent in both
        assert 2 not in result.per_class
        assert result.overall == result.per_class[1]

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            dice_score(np.zeros((2, 2, 2), np.uint8), np.zeros((2, 2, 3), np.uint8), 2)

    def test_aggregate_mean_over_scoreable_volumes(self):
        r1 = DiceResult({1: 0.5, 2: 1.0}, 0.75)
        r2 = DiceResult({1: 1.0}, 1.0)
        agg = aggregate_dice([r1, r2], 3)
        assert agg.per_class == {1: 0.75, 2: 1.0}
        assert abs(agg.overall - 0.875) < 1e-12


class TestSlidingWindow:
    def test_volume_equal_to_patch_matches_direct_forward(self):
        model = build_model(MICRO, seed=3)
        head = LinearHead(MICRO.level_channels, num_classes=3, seed=1)
        data = np.random.default_rng(3).random(PATCH, dtype=np.float32)
        pred = predict_labels(model, head, data, PATCH, 3)
        direct = linear_eval_forward(model, head, data).detach().numpy().argmax(axis=0)
        np.testing.assert_array_equal(pred, direct)

    def test_larger_volume_covered(self):
        model = build_model(MICRO, seed=4)
        head = NonlinearHead(MICRO.level_channels, num_classes=3, seed=2)
        data = np.random.default_rng(4).random((24, 24, 24), dtype=np.float32)
        pred = predict_labels(model, head, data, PATCH, 3)
        assert pred.shape == (24, 24, 24)
        assert pred.max() < 3

    def test_volume_smaller_than_patch_errors(self):
        model = build_model(MICRO, seed=5)
        head = LinearHead(MICRO.level_channels, 3)
        with pytest.raises(ValueError, match="smaller"):
            predict_labels(model, head, np.zeros((8, 8, 8), np.float32), PATCH, 3)


class TestProtocol:
    def test_fold_assignment_deterministic_and_partition(self):
        folds_a = fold_assignments(10, 3, seed=5)
        folds_b = fold_assignments(10, 3, seed=5)
        assert folds_a == folds_b
        flat = sorted(i for fold in folds_a for i in fold)
        assert flat == list(range(10))
        assert fold_assignments(10, 3, seed=6) != folds_a

    def test_too_few_cases_errors(self):
        with pytest.raises(ValueError, match="folds"):
            fold_assignments(1, 2, seed=0)

    def test_identical_folds_give_zero_std(self, labeled_cases, tmp_path):
        twin = [labeled_cases[0], labeled_cases[0]]
        report = evaluate_protocol(
            twin,
            3,
            k_folds=2,
            mode="scratch",
            pyramid_cfg=MICRO,
            patch_size=PATCH,
            cfg=DownstreamConfig(steps=2, patches_per_step=1),
        )
        assert report["std_overall"] == 0.0
        assert report["folds"][0]["overall"] == report["folds"][1]["overall"]

    def test_overall_recomputable_from_stored_volumes(self, labeled_cases):
        report = evaluate_protocol(
            labeled_cases,
            3,
            k_folds=3,
            mode="scratch",
            pyramid_cfg=MICRO,
            patch_size=PATCH,
            cfg=DownstreamConfig(steps=2, patches_per_step=1),
        )
        for fold in report["folds"]:
            per_class_vals = {}
            for vol in fold["volumes"]:
                for cls, val in vol["per_class"].items():
                    per_class_vals.setdefault(cls, []).append(val)
            recomputed = np.mean([np.mean(v) for v in per_class_vals.values()])
            assert abs(fold["overall"] - recomputed) < 1e-12
        assert abs(report["mean_overall"] - np.mean([f["overall"] for f in report["folds"]])) < 1e-12

    def test_linear_mode_requires_checkpoint(self, labeled_cases):
        with pytest.raises(ValueError, match="checkpoint"):
            evaluate_protocol(
                labeled_cases, 3, 2, "linear", MICRO, PATCH, DownstreamConfig(steps=1)
            )

    def test_protocol_deterministic(self, labeled_cases, tmp_path):
        model = build_model(MICRO, seed=9)
        ckpt = tmp_path / "pre.ckpt"
        save_checkpoint(ckpt, {}, model, step=1)
        kwargs = dict(
            dataset=labeled_cases,
            num_classes=3,
            k_folds=3,
            mode="linear",
            pyramid_cfg=MICRO,
            patch_size=PATCH,
            cfg=DownstreamConfig(steps=2, patches_per_step=1),
            checkpoint_path=ckpt,
        )
        assert evaluate_protocol(**kwargs) == evaluate_protocol(**kwargs)
