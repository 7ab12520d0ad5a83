import hashlib
import math

import numpy as np
import pytest

from glsgn.autodiff import Tensor
from glsgn.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from glsgn.config import GlsgnConfig, TrainRun
from glsgn.degradations import DegradedSample, generate_dataset, synth_background
from glsgn.imaging import Image, psnr, save_image
from glsgn.model import GlsgnModel
from glsgn.rng import derive_rng
from glsgn.training import (
    AdamState,
    TrainingError,
    adam_step,
    augment,
    build_from_checkpoint,
    center_crop,
    crop_pair,
    evaluate,
    read_manifest,
    train,
)

SMALL_CFG = dict(input_h=32, input_w=32, base_channels=4)


def quick_run(**kw):
    defaults = dict(steps=2, batch_size=1, crop_h=32, crop_w=32, seed=0, log_every=1)
    defaults.update(kw)
    return TrainRun(**defaults)


def make_dataset(tmp_path, n=4, size=32, seed=3):
    bgs = [synth_background(i + 10, size, size) for i in range(3)]
    return generate_dataset(tmp_path, "rain", bgs, count=n, seed=seed, train_fraction=0.5)


def sample_pair(rng, h=24, w=24):
    return DegradedSample(degraded=Image(rng.uniform(0, 1, (h, w, 3))),
                          background=Image(rng.uniform(0, 1, (h, w, 3))),
                          kind="rain", seed=0)


class TestAdam:
    def _param(self, value):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        return {"p": t}

    def test_zero_gradient_no_update(self):
        params = self._param([1.0, -2.0])
        params["p"].grad = np.zeros(2)
        st = AdamState.for_params(params, quick_run())
        adam_step(params, st)
        np.testing.assert_array_equal(params["p"].data, [1.0, -2.0])
        assert st.step == 1

    def test_first_step_closed_form(self):
        params = self._param([0.5])
        params["p"].grad = np.array([0.1])
        run = quick_run()
        st = AdamState.for_params(params, run)
        adam_step(params, st)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected_delta = -run.lr * 0.1 / (0.1 + run.adam_eps)
        assert params["p"].data[0] - 0.5 == pytest.approx(expected_delta, abs=1e-8)

    def test_equal_gradients_equal_updates(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([2.0]), requires_grad=True)
        a.grad = np.array([0.3])
        b.grad = np.array([0.3])
        params = {"a": a, "b": b}
        adam_step(params, AdamState.for_params(params, quick_run()))
        assert (a.data[0] - 1.0) == pytest.approx(b.data[0] - 2.0, abs=1e-12)

    def test_missing_gradient_named(self):
        params = self._param([1.0])
        with pytest.raises(TrainingError, match="'p'"):
            adam_step(params, AdamState.for_params(params, quick_run()))


class TestAugment:
    def test_identity_draw_unchanged(self, rng):
        s = sample_pair(rng)
        out = augment(s, derive_rng(2, 0))  # this stream draws k=0, no flips
        k0 = derive_rng(2, 0)
        if (int(k0.integers(0, 4)), int(k0.integers(0, 2)), int(k0.integers(0, 2))) == (0, 0, 0):
            np.testing.assert_array_equal(out.degraded.data, s.degraded.data)

    def test_some_draw_is_identity_and_some_is_not(self, rng):
        s = sample_pair(rng)
        results = [augment(s, derive_rng(0, k)) for k in range(12)]
        same = [np.array_equal(r.degraded.data, s.degraded.data) for r in results]
        assert any(same) and not all(same)

    def test_double_horizontal_flip_identity(self, rng):
        s = sample_pair(rng)
        flipped = DegradedSample(degraded=Image(s.degraded.data[:, ::-1].copy()),
                                 background=Image(s.background.data[:, ::-1].copy()),
                                 kind=s.kind, seed=s.seed)
        again = Image(flipped.degraded.data[:, ::-1].copy())
        np.testing.assert_array_equal(again.data, s.degraded.data)

    def test_pair_stays_aligned(self, rng):
        s = sample_pair(rng, 24, 24)
        before = psnr(s.degraded, s.background)
        for k in range(8):
            out = augment(s, derive_rng(5, k))
            assert psnr(out.degraded, out.background) == pytest.approx(before, abs=1e-9)

    def test_non_square_keeps_shape(self, rng):
        s = sample_pair(rng, 16, 24)
        for k in range(8):
            out = augment(s, derive_rng(6, k))
            assert out.degraded.data.shape == (16, 24, 3)


class TestCropPair:
    def test_full_size_identity(self, rng):
        s = sample_pair(rng)
        out = crop_pair(s, 24, 24, derive_rng(0, 1))
        np.testing.assert_array_equal(out.degraded.data, s.degraded.data)

    def test_same_seed_same_offset(self, rng):
        s = sample_pair(rng, 32, 32)
        a = crop_pair(s, 16, 16, derive_rng(3, 3))
        b = crop_pair(s, 16, 16, derive_rng(3, 3))
        np.testing.assert_array_equal(a.degraded.data, b.degraded.data)

    def test_crops_inside_bounds_many_draws(self, rng):
        s = sample_pair(rng, 20, 28)
        for k in range(1000):
            out = crop_pair(s, 8, 8, derive_rng(7, k))
            assert out.degraded.data.shape == (8, 8, 3)
            assert np.all(out.degraded.data >= 0) and np.all(out.degraded.data <= 1)

    def test_window_identical_on_both(self, rng):
        s = sample_pair(rng, 32, 32)
        joined = DegradedSample(degraded=Image(s.background.data.copy()),
                                background=Image(s.background.data.copy()),
                                kind="rain", seed=0)
        out = crop_pair(joined, 16, 16, derive_rng(9, 0))
        np.testing.assert_array_equal(out.degraded.data, out.background.data)

    def test_oversized_crop_rejected(self, rng):
        with pytest.raises(TrainingError, match="larger than image"):
            crop_pair(sample_pair(rng, 16, 16), 32, 32, derive_rng(0, 0))


class TestCheckpointIO:
    def test_round_trip_bytes(self, tmp_path, rng):
        cfg = GlsgnConfig(**SMALL_CFG)
        ckpt = Checkpoint(config=cfg,
                          tensors={"param:a": rng.normal(size=(3, 4)).astype(np.float32),
                                   "optim_g:step": np.array(7, dtype=np.uint64),
                                   "param:b": rng.normal(size=(2,)).astype(np.float64)},
                          master_seed=42, step=9)
        p1, p2 = tmp_path / "a.ck", tmp_path / "b.ck"
        save_checkpoint(p1, ckpt)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.master_seed == 42 and loaded.step == 9
        assert loaded.config == cfg
        np.testing.assert_array_equal(loaded.tensors["param:a"], ckpt.tensors["param:a"])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ck"
        p.write_bytes(b"NOPE" + b"\x00" * 30)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        cfg = GlsgnConfig(**SMALL_CFG)
        p = tmp_path / "x.ck"
        save_checkpoint(p, Checkpoint(config=cfg))
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        cfg = GlsgnConfig(**SMALL_CFG)
        p = tmp_path / "x.ck"
        save_checkpoint(p, Checkpoint(config=cfg, tensors={"param:a": np.ones(5, np.float32)}))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_shape_validation_against_config(self, tmp_path):
        cfg = GlsgnConfig(**SMALL_CFG)
        model = GlsgnModel(cfg)
        from glsgn.training import _pack_state
        from glsgn.losses import Discriminator
        disc = Discriminator(seed=0, dtype=np.float32)
        run = quick_run()
        ck = _pack_state(model, disc, AdamState.for_params(model.trainable_parameters(), run),
                         AdamState.for_params(disc.params, run), 0, 0)
        p = tmp_path / "m.ck"
        save_checkpoint(p, ck)
        loaded = load_checkpoint(p)
        m2, d2 = build_from_checkpoint(loaded)
        assert all(np.array_equal(m2.params[k].data, model.params[k].data)
                   for k in model.params)
        # corrupt one declared shape
        loaded.tensors["param:sg.stem.w"] = np.zeros((1, 1, 1, 1), np.float32)
        with pytest.raises(CheckpointError, match="sg.stem.w"):
            build_from_checkpoint(loaded)


class TestTrainLoop:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        make_dataset(tmp_path / "data")
        cfg = GlsgnConfig(**SMALL_CFG)
        model = GlsgnModel(cfg)
        init = {k: v.data.copy() for k, v in model.params.items()}
        ckpt_path, log_path = train(model, tmp_path / "data",
                                    tmp_path / "data" / "manifest_train.txt",
                                    quick_run(steps=0), tmp_path / "run", quiet=True)
        loaded = load_checkpoint(ckpt_path)
        for k, v in init.items():
            np.testing.assert_array_equal(loaded.tensors[f"param:{k}"], v)
        assert log_path.read_text().strip() == "step,l_pixel,l_perc,l_adv_g,l_d,total"

    def test_deterministic_bit_identical(self, tmp_path):
        make_dataset(tmp_path / "data")
        digests = []
        for tag in ("a", "b"):
            model = GlsgnModel(GlsgnConfig(**SMALL_CFG, seed=1))
            ckpt_path, log_path = train(model, tmp_path / "data",
                                        tmp_path / "data" / "manifest_train.txt",
                                        quick_run(steps=3, seed=5), tmp_path / tag, quiet=True)
            digests.append((hashlib.sha256(ckpt_path.read_bytes()).hexdigest(),
                            hashlib.sha256(log_path.read_bytes()).hexdigest()))
        assert digests[0] == digests[1]

    def test_loss_log_schema(self, tmp_path):
        make_dataset(tmp_path / "data")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        _, log_path = train(model, tmp_path / "data",
                            tmp_path / "data" / "manifest_train.txt",
                            quick_run(steps=2), tmp_path / "run", quiet=True)
        lines = log_path.read_text().splitlines()
        assert lines[0] == "step,l_pixel,l_perc,l_adv_g,l_d,total"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1" and len(first) == 6
        assert all(math.isfinite(float(v)) for v in first[1:])

    def test_perceptual_params_untouched(self, tmp_path):
        from glsgn.losses import PerceptualExtractor
        make_dataset(tmp_path / "data")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        before = PerceptualExtractor(seed=7, dtype=np.float32)
        hashes = {k: v.data.tobytes() for k, v in before.params.items()}
        train(model, tmp_path / "data", tmp_path / "data" / "manifest_train.txt",
              quick_run(steps=2, perceptual_seed=7), tmp_path / "run", quiet=True)
        after = PerceptualExtractor(seed=7, dtype=np.float32)
        assert {k: v.data.tobytes() for k, v in after.params.items()} == hashes

    def test_generator_discriminator_param_sets_disjoint(self, tmp_path):
        from glsgn.losses import Discriminator
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        disc = Discriminator(seed=0)
        assert set(model.params).isdisjoint(disc.params)

    def test_empty_manifest_rejected(self, tmp_path):
        (tmp_path / "m.txt").write_text("")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        with pytest.raises(TrainingError, match="empty"):
            train(model, tmp_path, tmp_path / "m.txt", quick_run(), tmp_path / "o")

    def test_missing_file_aborts_with_path(self, tmp_path):
        (tmp_path / "m.txt").write_text("rain/nope_in.ppm rain/nope_gt.ppm rain\n")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        with pytest.raises(TrainingError, match="nope_in.ppm"):
            train(model, tmp_path, tmp_path / "m.txt", quick_run(), tmp_path / "o")


class TestEvaluate:
    def test_report_counts_and_baseline(self, tmp_path):
        make_dataset(tmp_path / "data", n=6)
        cfg = GlsgnConfig(**SMALL_CFG)
        model = GlsgnModel(cfg)
        report = evaluate(model, tmp_path / "data", tmp_path / "data" / "manifest_test.txt")
        manifest_rows = read_manifest(tmp_path / "data",
                                      tmp_path / "data" / "manifest_test.txt")
        assert len(report.rows) == len(manifest_rows)
        # baseline columns recomputed independently
        from glsgn.imaging import load_image
        for row, (in_p, gt_p, _) in zip(report.rows, manifest_rows):
            a = center_crop(load_image(in_p), 32, 32)
            b = center_crop(load_image(gt_p), 32, 32)
            assert row.baseline_psnr == pytest.approx(psnr(a, b), rel=1e-9)

    def test_ground_truth_as_output_is_perfect(self, tmp_path):
        make_dataset(tmp_path / "data", n=4)
        rows = read_manifest(tmp_path / "data", tmp_path / "data" / "manifest_test.txt")

        class Identity:
            config = GlsgnConfig(**SMALL_CFG, dtype="float64")

            def forward(self, t):
                class Out:
                    final = t
                return Out()

        report = evaluate(Identity(), tmp_path / "data",
                          tmp_path / "data" / "manifest_test.txt")
        # identity model on the degraded image equals the baseline columns
        # (up to the float32 round trip through the model path)
        for row in report.rows:
            assert row.psnr == pytest.approx(row.baseline_psnr, rel=1e-5)

        gt_manifest = tmp_path / "data" / "gt_as_input.txt"
        gt_manifest.write_text("".join(
            f"{gt.relative_to(tmp_path / 'data')} {gt.relative_to(tmp_path / 'data')} rain\n"
            for _, gt, _ in rows))
        report = evaluate(Identity(), tmp_path / "data", gt_manifest)
        assert report.mean_psnr == math.inf
        assert report.mean_ssim == pytest.approx(1.0, abs=1e-12)

    def test_larger_images_center_cropped(self, tmp_path, rng):
        big = Image(rng.uniform(0, 1, (48, 48, 3)))
        save_image(big, tmp_path / "in.ppm")
        save_image(big, tmp_path / "gt.ppm")
        (tmp_path / "m.txt").write_text("in.ppm gt.ppm rain\n")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        report = evaluate(model, tmp_path, tmp_path / "m.txt")
        assert len(report.rows) == 1

    def test_too_small_rejected(self, tmp_path, rng):
        small = Image(rng.uniform(0, 1, (16, 16, 3)))
        save_image(small, tmp_path / "in.ppm")
        save_image(small, tmp_path / "gt.ppm")
        (tmp_path / "m.txt").write_text("in.ppm gt.ppm rain\n")
        model = GlsgnModel(GlsgnConfig(**SMALL_CFG))
        with pytest.raises(TrainingError, match="smaller"):
            evaluate(model, tmp_path, tmp_path / "m.txt")
