import numpy as np
import pytest

from glsgn import autodiff as ad
from glsgn.autodiff import ShapeError, Tensor
from glsgn.config import ConfigError, GlsgnConfig, LossWeights
from glsgn.losses import Discriminator, PerceptualExtractor, adversarial_g_loss, perceptual_loss, pixel_loss, total_loss
from glsgn.model import GlsgnModel, ablation_variant

TINY = dict(input_h=16, input_w=16, base_channels=4, encoder_depth=1,
            geometry=[(1, 2, 2), (2, 1, 1), (4, 1, 1)], global_geometry=(4, 1, 1),
            residual_blocks=1)

SMALL = dict(input_h=32, input_w=32, base_channels=4)


def image_batch(rng, cfg, b=1):
    return Tensor(rng.uniform(0, 1, (b, 3, cfg.input_h, cfg.input_w)).astype(cfg.np_dtype))


class TestConfig:
    def test_default_valid(self):
        GlsgnConfig()

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="divisible by 16"):
            GlsgnConfig(input_h=60)

    def test_first_divisor_must_be_one(self):
        with pytest.raises(ConfigError, match="full resolution"):
            GlsgnConfig(geometry=[(2, 4, 4), (2, 2, 2), (4, 1, 1)])

    def test_nondecreasing_divisors(self):
        with pytest.raises(ConfigError, match="nondecreasing"):
            GlsgnConfig(geometry=[(1, 4, 4), (4, 2, 2), (2, 1, 1)])

    def test_patch_divisibility_by_depth(self):
        with pytest.raises(ConfigError, match="divisible by 8"):
            GlsgnConfig(input_h=32, input_w=32, geometry=[(1, 8, 8), (2, 2, 2), (4, 1, 1)])

    def test_lp_divisor_pattern_required_for_full(self):
        with pytest.raises(ConfigError, match="pyramid synthesis"):
            GlsgnConfig(geometry=[(1, 4, 4), (2, 2, 2), (2, 1, 1)], variant="full")
        GlsgnConfig(geometry=[(1, 4, 4), (2, 2, 2), (2, 2, 2)], variant="+pac")

    def test_round_trip_dict(self):
        cfg = GlsgnConfig(base_channels=8, variant="+pn", loss_weights=LossWeights(beta1=0.7))
        again = GlsgnConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="bogus_key"):
            GlsgnConfig.from_dict({"bogus_key": 1})


class TestGeometryTrace:
    def test_default_64_trace(self):
        cfg = GlsgnConfig()
        sizes = {name: (geom[1] * geom[2], cfg.patch_size(geom))
                 for name, geom in cfg.pathway_geometries()}
        assert sizes["s1"] == (16, (16, 16))
        assert sizes["s2"] == (4, (16, 16))
        assert sizes["s3"] == (1, (16, 16))
        assert sizes["sg"] == (1, (16, 16))

    def test_receptive_field_ordering(self):
        cfg = GlsgnConfig()
        fractions = [1.0 / (r * c) for (_, r, c) in cfg.geometry]
        assert fractions == sorted(fractions)  # covered area per patch nondecreasing

    def test_encoder_bottleneck_channels(self):
        m = GlsgnModel(GlsgnConfig())
        assert m.params["sg.enc3.w"].shape[0] == 128  # depth 3, base 16


class TestStructure:
    def test_encoder_shapes_identical_across_pathways(self):
        m = GlsgnModel(GlsgnConfig())
        shapes = [m.pathway_param_shapes(name) for name, _ in m.config.pathway_geometries()]
        assert all(s == shapes[0] for s in shapes[1:])

    def test_parameters_independent_downstream_pathway(self):
        cfg = GlsgnConfig(**SMALL)
        m = GlsgnModel(cfg)
        rng = np.random.default_rng(0)
        x = image_batch(rng, cfg)
        before = m.forward(x)
        for k, p in m.params.items():
            if k.startswith("s3."):
                p.data += 0.3
        after = m.forward(Tensor(x.data.copy()))
        for name in ("sg", "s1", "s2"):
            np.testing.assert_array_equal(before.per_pathway[name].restored.data,
                                          after.per_pathway[name].restored.data)
        assert not np.array_equal(before.per_pathway["s3"].restored.data,
                                  after.per_pathway["s3"].restored.data)

    def test_zero_weights_give_half_everywhere(self):
        cfg = GlsgnConfig(**SMALL)
        m = GlsgnModel(cfg)
        for p in m.params.values():
            p.data[:] = 0.0
        out = m.forward(image_batch(np.random.default_rng(1), cfg))
        np.testing.assert_allclose(out.final.data, 0.5, atol=1e-6)
        for po in out.per_pathway.values():
            np.testing.assert_allclose(po.restored.data, 0.5, atol=1e-6)

    def test_restored_in_unit_interval(self):
        cfg = GlsgnConfig(**SMALL)
        m = GlsgnModel(cfg)
        out = m.forward(image_batch(np.random.default_rng(2), cfg))
        for po in out.per_pathway.values():
            assert np.all(po.restored.data > 0) and np.all(po.restored.data < 1)
        assert np.all(out.final.data >= 0) and np.all(out.final.data <= 1)

    def test_mask_shapes_match_residual_scales(self):
        cfg = GlsgnConfig()
        out = GlsgnModel(cfg).forward(image_batch(np.random.default_rng(3), cfg))
        assert out.per_pathway["s1"].mask.shape == (1, 1, 64, 64)
        assert out.per_pathway["s2"].mask.shape == (1, 1, 32, 32)
        assert out.per_pathway["sg"].mask.shape == (1, 1, 16, 16)
        assert out.per_pathway["s3"].mask is None


class TestForward:
    def test_output_shape_and_determinism(self):
        cfg = GlsgnConfig(**SMALL)
        m = GlsgnModel(cfg)
        x = image_batch(np.random.default_rng(4), cfg, b=2)
        o1 = m.forward(x)
        o2 = m.forward(Tensor(x.data.copy()))
        assert o1.final.shape == x.shape
        assert np.array_equal(o1.final.data, o2.final.data)

    def test_shape_mismatch_rejected(self):
        cfg = GlsgnConfig(**SMALL)
        m = GlsgnModel(cfg)
        with pytest.raises(ShapeError, match="does not match"):
            m.forward(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))

    def test_construction_deterministic_by_seed(self):
        a = GlsgnModel(GlsgnConfig(**SMALL, seed=5))
        b = GlsgnModel(GlsgnConfig(**SMALL, seed=5))
        c = GlsgnModel(GlsgnConfig(**SMALL, seed=6))
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
        assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


class TestPyramidSynthesisHarness:
    def test_consistent_components_reproduce_finest_restoration(self):
        # feed the synthesis path multi-scale versions of one image with
        # identity masks: the output must reproduce that image
        rng = np.random.default_rng(5)
        b1 = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
        b2 = ad.downsample2x(b1)
        bg = ad.downsample2x(b2)
        low = ad.resize_bilinear(ad.downsample2x(bg), 16, 16)  # low-pass complement
        ones = lambda t: Tensor(np.ones((1, 1, t.shape[2], t.shape[3]), dtype=np.float32))
        out = GlsgnModel.synthesize_pyramid(b1, b2, bg, low, (ones(b1), ones(b2), ones(bg)))
        assert np.max(np.abs(out.data - b1.data)) <= 1e-5


class TestEndToEndGradients:
    def test_tiny_model_matches_finite_differences(self):
        cfg = GlsgnConfig(**TINY, dtype="float64", seed=3)
        m = GlsgnModel(cfg)
        rng = np.random.default_rng(6)
        x_data = rng.uniform(0.1, 0.9, (1, 3, 16, 16))

        picks = ["s1.stem.w", "s1.enc1.w", "s2.dec0.res0.a.w", "sg.att.w",
                 "s1.mask.w", "s3.head.b", "s1.dec0.res0.pn.b"]

        def loss_value():
            return m.forward(Tensor(x_data.copy())).final.mean()

        base = loss_value()
        base.backward()
        grads = {k: m.params[k].grad.copy() for k in picks}
        for p in m.params.values():
            p.zero_grad()

        eps = 1e-5
        for k in picks:
            p = m.params[k]
            flat = p.data.reshape(-1)
            idx = rng.integers(flat.size)
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_value().item()
            flat[idx] = orig - eps
            down = loss_value().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[k].reshape(-1)[idx]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            assert err <= 1e-3, f"{k}: analytic {analytic} vs numeric {numeric}"

    def test_no_dead_branches_full_variant(self):
        cfg = GlsgnConfig(**SMALL, dtype="float64", seed=9)
        m = GlsgnModel(cfg)
        rng = np.random.default_rng(7)
        x = image_batch(rng, cfg)
        gt = image_batch(rng, cfg)
        d = Discriminator(seed=0, dtype=np.float64)
        ext = PerceptualExtractor(seed=0, dtype=np.float64)
        w = LossWeights()
        out = m.forward(x)
        restored = [po.restored for po in out.per_pathway.values()]
        loss = total_loss(pixel_loss(gt, restored, out.final, w),
                          perceptual_loss(gt, restored, out.final, ext, w),
                          adversarial_g_loss(d, out.final), w)
        loss.backward()
        dead = [k for k, p in m.trainable_parameters().items()
                if p.grad is None or np.abs(p.grad).max() == 0.0]
        assert dead == []

    def test_masks_frozen_without_pyramid(self):
        cfg = GlsgnConfig(**SMALL, variant="+pac")
        m = GlsgnModel(cfg)
        assert "s1.mask.w" in m.params
        assert not m.params["s1.mask.w"].requires_grad
        assert "s1.mask.w" not in m.trainable_parameters()


class TestAblationVariants:
    def test_all_variants_run_forward_backward(self):
        base = GlsgnConfig(**SMALL)
        rng = np.random.default_rng(8)
        for variant in ("global-only", "global-local", "+pn", "+pac", "full"):
            m = ablation_variant(base, variant)
            x = image_batch(rng, m.config)
            out = m.forward(x)
            assert out.final.shape == x.shape
            out.final.mean().backward()
            assert any(p.grad is not None for p in m.trainable_parameters().values())

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            ablation_variant(GlsgnConfig(**SMALL), "mega")

    def test_parameter_count_ordering(self):
        base = GlsgnConfig(**SMALL)
        count = {v: sum(p.size for p in ablation_variant(base, v).params.values())
                 for v in ("global-only", "global-local", "+pn", "+pac", "full")}
        assert count["global-only"] < count["full"]
        assert count["global-local"] <= count["+pn"] <= count["+pac"] == count["full"]

    def test_full_equals_default_construction(self):
        base = GlsgnConfig(**SMALL)
        a = ablation_variant(base, "full")
        b = GlsgnModel(base)
        assert a.params.keys() == b.params.keys()
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_global_only_output_is_upsampled_global(self):
        cfg = GlsgnConfig(**SMALL, variant="global-only")
        m = GlsgnModel(cfg)
        x = image_batch(np.random.default_rng(9), cfg)
        out = m.forward(x)
        want = ad.resize_bilinear(out.per_pathway["sg"].restored, 32, 32)
        np.testing.assert_allclose(out.final.data, np.clip(want.data, 0, 1), atol=1e-7)
        assert list(out.per_pathway) == ["sg"]

    def test_variant_parameter_sets_differ(self):
        base = GlsgnConfig(**SMALL)
        keys = {v: set(ablation_variant(base, v).params)
                for v in ("global-only", "global-local", "+pn", "+pac")}
        assert keys["global-only"] != keys["global-local"]
        assert keys["global-local"] != keys["+pn"]
        assert keys["+pn"] != keys["+pac"]
