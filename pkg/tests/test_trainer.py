import json
import math

import numpy as np
import pytest
import torch

from voxelpair.augment import AugmentationSpec, InpaintSpec, IntensitySpec, ShuffleSpec
from voxelpair.backbone import PyramidConfig, build_model
from voxelpair.checkpoint import stable_parameter_names
from voxelpair.objectives import LossConfig
from voxelpair.trainer import (
    AblationConfig,
    NonFiniteLossError,
    TrainConfig,
    assemble_batch,
    assemble_pair,
    batch_loss,
    latest_checkpoint,
    make_optimizer,
    moving_average,
    pretrain_step,
    pyramid_config_for,
    read_metrics,
    run_pretraining,
)
from voxelpair.volio import generate_synthetic_volume

MICRO_PYR = PyramidConfig(num_scales=2, base_channels=4, proj_channels=4, embed_dim=8)


def micro_train_cfg(**overrides):
    defaults = dict(
        steps=4,
        pairs_per_batch=2,
        voxels_per_pair=16,
        lr=3e-4,
        seed=0,
        checkpoint_every=2,
        patch_size=(16, 16, 16),
        min_overlap_fraction=0.25,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def small_aug_spec():
    return AugmentationSpec(
        shuffle=ShuffleSpec(num_blocks=4, block_size_range=(2, 4), probability=0.8),
        inpaint=InpaintSpec(num_regions=2, region_size_range=(3, 5), probability=0.5),
        intensity=IntensitySpec(num_control_points=5, probability=0.9),
    )


@pytest.fixture(scope="module")
def volumes():
    return [generate_synthetic_volume(s, (32, 32, 32), 3).volume for s in range(2)]


def fresh_state(cfg, seed=0):
    model = build_model(MICRO_PYR, seed=seed)
    return model, make_optimizer(model, cfg)


class TestConfigValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError, match="steps"):
            micro_train_cfg(steps=0)
        with pytest.raises(ValueError, match="voxels_per_pair"):
            micro_train_cfg(voxels_per_pair=1)
        with pytest.raises(ValueError, match="optimizer"):
            micro_train_cfg(optimizer="sgd")
        with pytest.raises(ValueError, match="min_overlap"):
            micro_train_cfg(min_overlap_fraction=0.0)

    def test_ablation_needs_a_loss(self):
        with pytest.raises(ValueError, match="loss term"):
            AblationConfig(contrastive=False, restorative=False)

    def test_arch_switch_changes_pyramid(self):
        base = PyramidConfig()
        rebal = pyramid_config_for(AblationConfig(), base)
        deep = pyramid_config_for(AblationConfig(rebalanced_arch=False), base)
        assert rebal == base
        assert deep.num_scales == base.num_scales + 1
        assert deep.base_channels == base.base_channels // 2
        assert deep.proj_channels == base.proj_channels

    def test_architecture_recovered_from_snapshot(self):
        from voxelpair.trainer import architecture_from_snapshot

        snapshot = {
            "pyramid": {"num_scales": 4, "base_channels": 16, "proj_channels": 16, "embed_dim": 64},
            "ablation": {"augment": False, "contrastive": True, "restorative": False,
                         "rebalanced_arch": False},
        }
        arch = architecture_from_snapshot(snapshot)
        assert (arch.num_scales, arch.base_channels) == (5, 8)
        snapshot["ablation"]["rebalanced_arch"] = True
        arch = architecture_from_snapshot(snapshot)
        assert (arch.num_scales, arch.base_channels) == (4, 16)


class TestBatchAssembly:
    def test_streams_are_schedule_independent(self, volumes):
        cfg = micro_train_cfg()
        spec = small_aug_spec()
        serial = assemble_batch(volumes, 3, cfg, spec, True, pool=None)
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=4) as pool:
            pooled = assemble_batch(volumes, 3, cfg, spec, True, pool=pool)
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a.aug_a.data, b.aug_a.data)
            np.testing.assert_array_equal(a.aug_b.data, b.aug_b.data)
            np.testing.assert_array_equal(a.voxels.coords_a, b.voxels.coords_a)

    def test_pair_streams_differ_by_index_and_step(self, volumes):
        cfg = micro_train_cfg()
        spec = small_aug_spec()
        p0 = assemble_pair(volumes, 1, 0, cfg, spec, True)
        p1 = assemble_pair(volumes, 1, 1, cfg, spec, True)
        q0 = assemble_pair(volumes, 2, 0, cfg, spec, True)
        assert not np.array_equal(p0.aug_a.data, p1.aug_a.data)
        assert not np.array_equal(p0.aug_a.data, q0.aug_a.data)

    def test_augment_off_keeps_patches_clean(self, volumes):
        cfg = micro_train_cfg()
        sample = assemble_pair(volumes, 1, 0, cfg, small_aug_spec(), False)
        np.testing.assert_array_equal(sample.aug_a.data, sample.pair.patch_a)
        assert not sample.aug_a.touched_mask.any()

    def test_augmented_pair_keeps_correspondence_on_clean_crops(self, volumes):
        cfg = micro_train_cfg()
        sample = assemble_pair(volumes, 5, 0, cfg, small_aug_spec(), True)
        vals_a = sample.pair.patch_a[tuple(sample.voxels.coords_a.T)]
        vals_b = sample.pair.patch_b[tuple(sample.voxels.coords_b.T)]
        np.testing.assert_array_equal(vals_a, vals_b)


class TestPretrainStep:
    def test_identical_state_gives_identical_report(self, volumes):
        cfg = micro_train_cfg()
        batch = assemble_batch(volumes, 1, cfg, small_aug_spec(), True)
        records = []
        for _ in range(2):
            model, opt = fresh_state(cfg)
            records.append(pretrain_step(model, opt, batch, LossConfig(), AblationConfig(), 1))
        assert records[0].loss == records[1].loss

    def test_zero_lambda_equals_contrastive_only_updates(self, volumes):
        cfg = micro_train_cfg()
        spec = small_aug_spec()
        params = {}
        for key, (loss_cfg, ablation) in {
            "lam0": (LossConfig(tau=0.1, lam=0.0), AblationConfig()),
            "no_recon": (LossConfig(tau=0.1, lam=10.0), AblationConfig(restorative=False)),
        }.items():
            model, opt = fresh_state(cfg)
            for step in (1, 2):
                batch = assemble_batch(volumes, step, cfg, spec, True)
                pretrain_step(model, opt, batch, loss_cfg, ablation, step)
            params[key] = stable_parameter_names(model)
        for name in params["lam0"]:
            assert torch.equal(params["lam0"][name], params["no_recon"][name]), name

    def test_short_run_descends(self, volumes):
        cfg = micro_train_cfg(steps=200, voxels_per_pair=32)
        model, opt = fresh_state(cfg)
        spec = small_aug_spec()
        losses = []
        for step in range(1, 201):
            batch = assemble_batch(volumes, step, cfg, spec, True)
            rec = pretrain_step(model, opt, batch, LossConfig(), AblationConfig(), step)
            losses.append(rec.loss.l_total)
        assert all(math.isfinite(v) for v in losses)
        assert moving_average(losses, 200) < moving_average(losses, 10)

    def test_recon_targets_are_the_clean_crops(self, volumes):
        # corrupt heavily; the reported l_r must be the MSE against the
        # unaugmented patches, not the augmented inputs
        cfg = micro_train_cfg()
        spec = AugmentationSpec(
            shuffle=ShuffleSpec(probability=0.0),
            inpaint=InpaintSpec(num_regions=4, region_size_range=(6, 8), probability=1.0),
            intensity=IntensitySpec(probability=0.0),
        )
        batch = assemble_batch(volumes, 1, cfg, spec, True)
        assert any(not np.array_equal(ps.aug_a.data, ps.pair.patch_a) for ps in batch)
        model, _ = fresh_state(cfg)
        _, report = batch_loss(model, batch, LossConfig(), AblationConfig())
        with torch.no_grad():
            x_aug = torch.stack(
                [torch.as_tensor(s) for ps in batch for s in (ps.aug_a.data, ps.aug_b.data)]
            )[:, None]
            xhat = model.recon(model.pyramid(x_aug)[0])[:, 0]
            expected = np.mean(
                [
                    (
                        float((torch.as_tensor(ps.pair.patch_a) - xhat[2 * p]).square().mean())
                        + float((torch.as_tensor(ps.pair.patch_b) - xhat[2 * p + 1]).square().mean())
                    )
                    / 2
                    for p, ps in enumerate(batch)
                ]
            )
        assert abs(report.l_r - expected) < 1e-6

    def test_non_finite_loss_aborts(self, volumes):
        cfg = micro_train_cfg()
        model, opt = fresh_state(cfg)
        with torch.no_grad():
            model.fpn.stem.weight.fill_(float("inf"))
        batch = assemble_batch(volumes, 1, cfg, small_aug_spec(), True)
        with pytest.raises((NonFiniteLossError, ValueError)):
            pretrain_step(model, opt, batch, LossConfig(), AblationConfig(), 1)

    @pytest.mark.parametrize(
        "ablation",
        [
            AblationConfig(augment=False, contrastive=True, restorative=False, rebalanced_arch=False),
            AblationConfig(augment=True, contrastive=True, restorative=False, rebalanced_arch=False),
            AblationConfig(augment=True, contrastive=False, restorative=True, rebalanced_arch=False),
            AblationConfig(augment=True, contrastive=True, restorative=True, rebalanced_arch=False),
            AblationConfig(augment=True, contrastive=True, restorative=True, rebalanced_arch=True),
        ],
    )
    def test_every_ablation_row_runs(self, volumes, ablation):
        cfg = micro_train_cfg()
        arch = pyramid_config_for(ablation, MICRO_PYR)
        model = build_model(arch, seed=0)
        opt = make_optimizer(model, cfg)
        batch = assemble_batch(volumes, 1, cfg, small_aug_spec(), ablation.augment)
        record = pretrain_step(model, opt, batch, LossConfig(), ablation, 1)
        assert math.isfinite(record.loss.l_total)
        if not ablation.contrastive:
            assert record.loss.l_c == 0.0
        if not ablation.restorative:
            assert record.loss.l_r == 0.0 and record.loss.l_total == record.loss.l_c


class TestRunPretraining:
    def test_metrics_line_count_and_checkpoints(self, volumes, tmp_path):
        cfg = micro_train_cfg(steps=4, checkpoint_every=2)
        final = run_pretraining(
            volumes, MICRO_PYR, cfg, small_aug_spec(), LossConfig(), AblationConfig(), tmp_path
        )
        assert final.exists()
        records = read_metrics(tmp_path)
        assert len(records) == 4
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        assert latest_checkpoint(tmp_path) == final

    def test_resume_reproduces_run_bitwise(self, volumes, tmp_path):
        spec = small_aug_spec()
        full_dir, split_dir = tmp_path / "full", tmp_path / "split"
        cfg_full = micro_train_cfg(steps=4, checkpoint_every=10)
        run_pretraining(volumes, MICRO_PYR, cfg_full, spec, LossConfig(), AblationConfig(), full_dir)

        cfg_half = micro_train_cfg(steps=2, checkpoint_every=10)
        run_pretraining(volumes, MICRO_PYR, cfg_half, spec, LossConfig(), AblationConfig(), split_dir)
        cfg_rest = micro_train_cfg(steps=4, checkpoint_every=10)
        final = run_pretraining(
            volumes, MICRO_PYR, cfg_rest, spec, LossConfig(), AblationConfig(), split_dir
        )
        assert final.exists()

        full = read_metrics(full_dir)
        split = read_metrics(split_dir)
        assert len(full) == len(split) == 4
        for a, b in zip(full, split):
            assert a["step"] == b["step"]
            assert a["l_c"] == b["l_c"] and a["l_r"] == b["l_r"] and a["l_total"] == b["l_total"]

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            run_pretraining(
                [], MICRO_PYR, micro_train_cfg(), small_aug_spec(), LossConfig(), AblationConfig(), tmp_path
            )

    def test_nan_writes_diagnostic_record(self, volumes, tmp_path, monkeypatch):
        import voxelpair.trainer as trainer_mod

        def poisoned(*args, **kwargs):
            raise NonFiniteLossError(1, "non-finite loss injected")

        monkeypatch.setattr(trainer_mod, "pretrain_step", poisoned)
        with pytest.raises(NonFiniteLossError):
            run_pretraining(
                volumes, MICRO_PYR, micro_train_cfg(), small_aug_spec(), LossConfig(), AblationConfig(), tmp_path
            )
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert lines and "error" in lines[-1] and lines[-1]["l_total"] is None
