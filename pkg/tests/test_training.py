import copy
import dataclasses
import json
import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcanet import training
from dcanet.config import ConfigError, LossWeights, SynthSpec, TrainConfig
from dcanet.data import (DATASET_MEAN, SegmentationSample, apply_augmentation, augment, crop_or_pad,
                         draw_augmentation, generate_synth_dataset, hflip, load_dataset, present_vector,
                         save_dataset, stack)
from dcanet.network import LossTerms, class_balanced_ce
from dcanet.training import (MS_SCALES, TrainingAborted, build_seeded_model, evaluate, file_digest,
                             load_checkpoint, multi_scale_infer, poly_lr, run_ordering_experiment,
                             save_checkpoint, train)

from conftest import tiny_experiment


class TestPolyLR:
    def test_examples(self):
        cfg = TrainConfig(base_lr=0.01, power=0.9, max_iter=1000)
        assert poly_lr(0, cfg) == 0.01
        assert poly_lr(1000, cfg) == 0.0
        assert poly_lr(500, cfg) == pytest.approx(0.0053589, abs=1e-7)

    def test_clamped_past_max_iter(self, caplog):
        cfg = TrainConfig(max_iter=10)
        with caplog.at_level(logging.WARNING):
            assert poly_lr(11, cfg) == 0.0
        assert "exceeds max_iter" in caplog.text

    @settings(max_examples=30, deadline=None)
    @given(power=st.floats(0.05, 5.0), max_iter=st.integers(1, 500), base=st.floats(1e-4, 1.0))
    def test_strictly_decreasing(self, power, max_iter, base):
        cfg = TrainConfig(base_lr=base, power=power, max_iter=max_iter)
        lrs = [poly_lr(i, cfg) for i in range(max_iter + 1)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_reference_recipe_defaults(self):
        cfg = TrainConfig()
        assert (cfg.momentum, cfg.weight_decay, cfg.power) == (0.9, 0.0001, 0.9)


class TestTrainConfigValidation:
    @pytest.mark.parametrize("kw", [dict(power=0), dict(momentum=1.0), dict(base_lr=0),
                                    dict(scale_range=(0.4, 1.0)), dict(scale_range=(1.0, 2.5)),
                                    dict(rotation_range=(-11, 0)), dict(max_iter=0), dict(class_balance="x")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def _coordinate_sample(size=24, k=5):
    """Image channels 0/1 hold the row/column coordinate; labels encode the pixel index."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float32)
    image = np.stack([rows, cols, np.zeros_like(rows)])
    labels = (rows * size + cols).astype(np.int64)
    return SegmentationSample(image, labels, np.zeros(k, np.float32))


class TestAugmentation:
    def test_mirror_is_involution(self):
        s = generate_synth_dataset(SynthSpec(num_images=1, image_size=32))[0]
        twice = hflip(hflip(s))
        assert np.array_equal(twice.image, s.image) and np.array_equal(twice.labels, s.labels)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_parameter_bounds(self, seed):
        cfg = TrainConfig(rotation_range=(-10.0, 10.0), blur=True)
        p = draw_augmentation(cfg, np.random.default_rng(seed))
        assert 0.5 <= p.scale <= 2.0
        assert -10.0 <= p.angle <= 10.0
        assert 0.0 <= p.blur_sigma <= 1.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_image_and_labels_share_the_geometric_transform(self, seed):
        size = 24
        cfg = TrainConfig(rotation_range=(-10.0, 10.0), crop_size=20)
        out = augment(_coordinate_sample(size), cfg, np.random.default_rng(seed))
        valid = out.labels != 255
        row_lab, col_lab = np.divmod(out.labels[valid], size)
        row_img, col_img = out.image[0][valid], out.image[1][valid]
        # bilinear interpolation of a linear ramp is exact away from the fill border
        inside = (row_img > 1) & (row_img < size - 2) & (col_img > 1) & (col_img < size - 2)
        assert inside.sum() > 20
        assert np.all(np.abs(row_img[inside] - row_lab[inside]) <= 0.5 + 1e-4)
        assert np.all(np.abs(col_img[inside] - col_lab[inside]) <= 0.5 + 1e-4)

    def test_mirror_flips_coordinates_consistently(self):
        s = hflip(_coordinate_sample(8))
        assert np.array_equal(s.image[1][:, 0], np.full(8, 7.0))
        assert np.array_equal(s.labels[:, 0] % 8, np.full(8, 7))

    def test_blur_leaves_labels_alone(self):
        s = generate_synth_dataset(SynthSpec(num_images=1, image_size=32))[0]
        from dcanet.data import AugParams
        out = apply_augmentation(s, AugParams(False, 1.0, 0.0, 0.8))
        assert np.array_equal(out.labels, s.labels)
        assert not np.array_equal(out.image, s.image)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_present_matches_augmented_labels(self, seed):
        rng = np.random.default_rng(seed)
        s = generate_synth_dataset(SynthSpec(num_images=1, image_size=32, seed=seed % 1000))[0]
        cfg = TrainConfig(rotation_range=(-10.0, 10.0), blur=True, crop_size=24)
        out = augment(s, cfg, rng)
        assert np.array_equal(out.present, present_vector(out.labels, 5))
        assert out.image.shape == (3, 24, 24) and out.labels.shape == (24, 24)

    def test_rotation_fills_with_ignore_and_mean(self):
        s = generate_synth_dataset(SynthSpec(num_images=1, image_size=32))[0]
        from dcanet.data import AugParams
        out = apply_augmentation(s, AugParams(False, 1.0, 10.0, 0.0))
        assert out.labels[0, 0] == 255 and out.image[0, 0, 0] == pytest.approx(DATASET_MEAN[0])

    def test_pad_when_smaller_than_crop(self, rng):
        s = generate_synth_dataset(SynthSpec(num_images=1, image_size=32))[0]
        out = crop_or_pad(s, 40, rng)
        assert out.labels.shape == (40, 40)
        assert np.all(out.labels[32:] == 255) and np.allclose(out.image[:, 32:], 0.5)


class TestSynthData:
    def test_determinism(self):
        a = generate_synth_dataset(SynthSpec(num_images=10))
        b = generate_synth_dataset(SynthSpec(num_images=10))
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()

    def test_reference_set_covers_every_class(self):
        data = generate_synth_dataset(SynthSpec(num_images=200, image_size=64, num_classes=5))
        counts = np.stack([s.present for s in data]).sum(0)
        assert np.all(counts >= 10), counts

    def test_label_range_and_present_consistency(self):
        for s in generate_synth_dataset(SynthSpec(num_images=50, image_size=48)):
            assert s.labels.min() >= 0 and s.labels.max() < 5
            assert np.array_equal(s.present, present_vector(s.labels, 5))
            assert s.image.shape == (3, 48, 48) and s.image.dtype == np.float32

    def test_full_scene_coherence_gives_one_kind_per_image(self):
        data = generate_synth_dataset(SynthSpec(num_images=40, scene_coherence=1.0, min_shapes=2))
        assert all(s.present[1:].sum() == 1 for s in data)

    def test_zero_coherence_mixes_kinds(self):
        data = generate_synth_dataset(SynthSpec(num_images=40, scene_coherence=0.0, min_shapes=3))
        assert any(s.present[1:].sum() > 1 for s in data)

    def test_coherence_range(self):
        with pytest.raises(ConfigError):
            SynthSpec(scene_coherence=1.5)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            generate_synth_dataset(SynthSpec(num_images=1, image_size=8))

    def test_storage_roundtrip(self, tmp_path):
        data = generate_synth_dataset(SynthSpec(num_images=3, image_size=32))
        save_dataset(data, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["samples"]) == 3 and manifest["num_classes"] == 5
        loaded = load_dataset(tmp_path)
        for a, b in zip(data, loaded):
            assert np.array_equal(a.labels, b.labels) and np.array_equal(a.present, b.present)
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def _no_aug(**kw):
    return TrainConfig(mirror=False, scale_range=(1.0, 1.0), crop_size=32, **kw)


class TestTrain:
    def test_single_step_matches_sgd_oracle(self):
        exp = tiny_experiment("cascade")
        data = generate_synth_dataset(exp.data.synth)[:4]
        cfg = _no_aug(max_iter=1, batch_size=4, base_lr=0.05, class_balance="uniform",
                      loss_weights=LossWeights(1.0, 0.0, 0.0))
        model = build_seeded_model(exp.model, 0)
        ref = copy.deepcopy(model).train()
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        train(model, data, cfg)
        images, labels, _ = stack(data)
        loss = class_balanced_ce(ref(torch.from_numpy(images)).scores, torch.from_numpy(labels))
        loss.backward()
        for name, p in ref.named_parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            expected = before[name] - 0.05 * (g + 1e-4 * before[name])
            after = dict(model.named_parameters())[name].detach()
            assert (after - expected).abs().max() <= 1e-6, name

    def test_loss_decreases_on_fixed_batch(self):
        exp = tiny_experiment("cascade")
        data = generate_synth_dataset(dataclasses.replace(exp.data.synth, num_images=16))
        images, labels, _ = stack(data[:8])
        images, labels = torch.from_numpy(images), torch.from_numpy(labels)

        def fixed_batch_loss(m):
            m = copy.deepcopy(m).train()
            with torch.no_grad():
                return float(class_balanced_ce(m(images).scores, labels))

        before, after = [], []
        for seed in range(3):
            model = build_seeded_model(exp.model, seed)
            before.append(fixed_batch_loss(model))
            train(model, data, _no_aug(max_iter=50, batch_size=4, base_lr=0.02, seed=seed))
            after.append(fixed_batch_loss(model))
        assert np.median(after) < np.median(before), (before, after)

    def test_metric_log_and_checkpoints(self, tmp_path):
        exp = tiny_experiment("cascade", max_iter=4)
        data = generate_synth_dataset(exp.data.synth)
        cfg = dataclasses.replace(exp.train, checkpoint_every=2)
        result = train(build_seeded_model(exp.model, 0), data, cfg, out_dir=tmp_path, experiment=exp)
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["iter"] for r in lines] == [0, 1, 2, 3]
        assert set(lines[0]) == {"iter", "lr", "loss_total", "loss_main", "loss_aux", "loss_sem"}
        assert all(math.isfinite(r["loss_sem"]) and r["loss_sem"] > 0 for r in lines)
        assert lines[0]["lr"] == cfg.base_lr
        assert (tmp_path / "checkpoint_000002.zip").exists() and (tmp_path / "checkpoint_000004.zip").exists()
        assert result.checkpoint == tmp_path / "checkpoint_final.zip"

    def test_nan_loss_aborts_with_last_checkpoint(self, tmp_path, monkeypatch):
        exp = tiny_experiment("none", max_iter=6)
        data = generate_synth_dataset(exp.data.synth)
        real = training.compute_losses
        calls = {"n": 0}

        def poisoned(*args, **kw):
            terms = real(*args, **kw)
            calls["n"] += 1
            if calls["n"] == 4:
                return LossTerms(terms.total * float("nan"), terms.main, terms.aux, terms.sem)
            return terms

        monkeypatch.setattr(training, "compute_losses", poisoned)
        cfg = dataclasses.replace(exp.train, checkpoint_every=2)
        with pytest.raises(TrainingAborted) as info:
            train(build_seeded_model(exp.model, 0), data, cfg, out_dir=tmp_path, experiment=exp)
        assert info.value.iteration == 3
        assert info.value.checkpoint == tmp_path / "checkpoint_000002.zip"
        assert "iteration 3" in str(info.value)

    def test_empty_dataset(self):
        exp = tiny_experiment("none")
        with pytest.raises(ValueError):
            train(build_seeded_model(exp.model, 0), [], exp.train)

    def test_full_run_determinism(self, tmp_path):
        exp = tiny_experiment("pyramid", max_iter=3)
        data = generate_synth_dataset(exp.data.synth)
        digests = []
        for run in ("a", "b"):
            res = train(build_seeded_model(exp.model, 1), data, exp.train, out_dir=tmp_path / run, experiment=exp)
            digests.append((file_digest(res.checkpoint), file_digest(tmp_path / run / "metrics.jsonl")))
        assert digests[0] == digests[1]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, gen):
        exp = tiny_experiment("cascade")
        model = build_seeded_model(exp.model, 3).eval()
        path = save_checkpoint(tmp_path / "c.zip", model, exp, 17)
        loaded, cfg, meta = load_checkpoint(path)
        assert cfg == exp and meta["iteration"] == 17 and meta["version"] == 1
        x = torch.rand(1, 3, 32, 32, generator=gen)
        with torch.no_grad():
            assert torch.equal(model(x).scores, loaded(x).scores)

    def test_bytes_are_deterministic(self, tmp_path):
        exp = tiny_experiment("none")
        model = build_seeded_model(exp.model, 0)
        a = save_checkpoint(tmp_path / "a.zip", model, exp, 1)
        b = save_checkpoint(tmp_path / "b.zip", model, exp, 1)
        assert file_digest(a) == file_digest(b)

    def test_key_mismatch_fails_loudly(self, tmp_path):
        exp = tiny_experiment("cascade")
        model = build_seeded_model(exp.model, 0)
        wrong = exp.with_overrides({"model.structure": "pyramid"})
        path = save_checkpoint(tmp_path / "c.zip", model, wrong, 1)
        with pytest.raises(KeyError, match="missing"):
            load_checkpoint(path)


class TestMultiScale:
    def test_default_scales(self):
        assert MS_SCALES == (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)

    def test_single_scale_equals_direct(self, gen):
        model = build_seeded_model(tiny_experiment("cascade").model, 0).eval()
        x = torch.rand(2, 3, 32, 32, generator=gen)
        with torch.no_grad():
            direct = torch.softmax(model(x).scores, 1)
        assert (multi_scale_infer(model, x, [1.0]) - direct).abs().max() <= 1e-6

    def test_identical_copies_average_to_themselves(self, gen):
        model = build_seeded_model(tiny_experiment("none").model, 0).eval()
        x = torch.rand(1, 3, 32, 32, generator=gen)
        one = multi_scale_infer(model, x, [1.0])
        assert (multi_scale_infer(model, x, [1.0] * 5) - one).abs().max() <= 1e-6

    def test_seven_scales_give_probabilities(self, gen):
        model = build_seeded_model(tiny_experiment("pyramid").model, 0).eval()
        p = multi_scale_infer(model, torch.rand(2, 3, 32, 32, generator=gen))
        assert p.shape == (2, 5, 32, 32)
        torch.testing.assert_close(p.sum(1), torch.ones(2, 32, 32))

    def test_empty_scales(self, gen):
        model = build_seeded_model(tiny_experiment("none").model, 0)
        with pytest.raises(ValueError):
            multi_scale_infer(model, torch.rand(1, 3, 16, 16), [])


class TestOrdering:
    def test_identical_runs_identical_scores(self):
        base = tiny_experiment("none", max_iter=2)
        a = run_ordering_experiment(["baseline", "cascade"], base, seeds=[0, 1])
        b = run_ordering_experiment(["baseline", "cascade"], base, seeds=[0, 1])
        assert a.scores == b.scores and a.complete

    def test_single_variant_single_seed(self):
        res = run_ordering_experiment(["crs"], tiny_experiment("none", max_iter=1), seeds=[0])
        table = res.table()
        assert list(table["per_seed"]) == ["crs"] and len(table["per_seed"]["crs"]) == 1
        assert table["pairwise_wins"] == {}

    def test_aborted_run_marks_incomplete(self, monkeypatch):
        def boom(*a, **k):
            raise TrainingAborted(0, None)

        monkeypatch.setattr(training, "train", boom)
        res = run_ordering_experiment(["baseline"], tiny_experiment("none", max_iter=1), seeds=[0])
        assert not res.complete and not res.table()["complete"]

    def test_evaluate_returns_confusion(self):
        exp = tiny_experiment("none")
        data = generate_synth_dataset(exp.data.synth)
        cm = evaluate(build_seeded_model(exp.model, 0), data[:2])
        assert cm.total == 2 * 32 * 32


def test_toy_ordering_config_recipe():
    from dcanet.training import toy_ordering_config
    cfg = toy_ordering_config()
    assert cfg.train.class_balance == "uniform" and cfg.train.scale_range == (0.75, 1.5)
    assert cfg.train.base_lr == 0.02 and cfg.train.max_iter == 1000
    assert (cfg.data.synth.num_images, cfg.data.num_val, cfg.data.synth.image_size) == (200, 50, 64)
    assert cfg.model.backbone == "toy" and cfg.model.num_classes == 5
