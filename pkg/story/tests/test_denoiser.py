import numpy as np
from django.test import SimpleTestCase

from story.denoiser.adapter import (
    AdapterWeights,
    Denoiser,
    DenoiserInput,
    adapter_parameters,
    history_cross_attention,
    mix,
    trainable_ratio,
)
from story.denoiser.unet import SITE_NAMES, UNet, freeze_base
from story.exceptions import DimensionError, EmptyContextError, NumericError
from story.fusion.model import FusionFeature
from story.numerics.gradcheck import grad_check
from story.numerics.nn import Role
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor, precision
from story.pipeline import build_models
from story.schemas.config import build_config

from .helpers import random_prompt, stream_for, tiny_models


def random_fusion(rng: RngStream, batch: int, length: int, dim: int) -> FusionFeature:
    return FusionFeature(features=Tensor(rng.normal((batch, length, dim))), mask=np.ones((batch, length), dtype=bool))


def random_input(rng: RngStream, batch: int = 2, lam=0.5, size: int = 32, dim: int = 8) -> DenoiserInput:
    return DenoiserInput(
        x_t=rng.normal((batch, size, size, 3)),
        t=rng.integers(0, 20, size=batch),
        prompt=random_prompt(rng, batch, 6, dim, visible=4),
        fusion=random_fusion(rng, batch, 6, dim),
        lam=lam,
    )


class BaseEquivalenceTests(SimpleTestCase):
    def setUp(self):
        self.models = tiny_models()

    def test_zero_lambda_is_bit_identical_to_base(self):
        with_adapter = Denoiser(self.models.unet, self.models.adapter)
        base = Denoiser(self.models.unet)
        for index in range(10):
            inp = random_input(stream_for(index), lam=0.0)
            bare = DenoiserInput(x_t=inp.x_t, t=inp.t, prompt=inp.prompt)
            self.assertEqual(with_adapter(inp).data.tobytes(), base(bare).data.tobytes())

    def test_missing_fusion_feature_is_bit_identical_to_base(self):
        inp = random_input(stream_for(0), lam=0.7)
        inp.fusion = None
        denoiser = Denoiser(self.models.unet, self.models.adapter)
        self.assertEqual(denoiser(inp).data.tobytes(), Denoiser(self.models.unet)(inp).data.tobytes())

    def test_positive_lambda_changes_the_prediction(self):
        inp = random_input(stream_for(0), lam=1.0)
        mixed = Denoiser(self.models.unet, self.models.adapter)(inp).data
        base = Denoiser(self.models.unet)(inp).data
        self.assertFalse(np.array_equal(mixed, base))

    def test_per_row_lambda(self):
        inp = random_input(stream_for(1), lam=np.array([0.0, 1.0]))
        mixed = Denoiser(self.models.unet, self.models.adapter)(inp).data
        base = Denoiser(self.models.unet)(inp).data
        np.testing.assert_allclose(mixed[0], base[0], atol=1e-5)
        self.assertFalse(np.allclose(mixed[1], base[1], atol=1e-5))


class DenoiserShapeTests(SimpleTestCase):
    def setUp(self):
        self.models = tiny_models()
        self.denoiser = self.models.denoiser()

    def test_output_matches_input_shape(self):
        inp = random_input(stream_for(2), batch=3)
        self.assertEqual(self.denoiser(inp).shape, (3, 32, 32, 3))

    def test_single_image(self):
        rng = stream_for(3)
        inp = DenoiserInput(x_t=rng.normal((32, 32, 3)), t=5)
        self.assertEqual(self.denoiser(inp).shape, (32, 32, 3))

    def test_unconditional_call_uses_null_token(self):
        rng = stream_for(4)
        x_t = rng.normal((1, 32, 32, 3))
        empty = random_prompt(rng, 1, 6, 8)
        empty.mask[:] = False
        silent = self.denoiser(DenoiserInput(x_t=x_t, t=3, prompt=empty)).data
        none = self.denoiser(DenoiserInput(x_t=x_t, t=3)).data
        np.testing.assert_allclose(silent, none, atol=1e-5)

    def test_wrong_image_size(self):
        with self.assertRaises(DimensionError):
            self.denoiser(DenoiserInput(x_t=np.zeros((1, 16, 16, 3), dtype=np.float32), t=1))

    def test_lambda_validation(self):
        with self.assertRaises(ValueError):
            DenoiserInput(x_t=np.zeros((32, 32, 3)), t=1, lam=-0.5)
        with self.assertRaises(NumericError):
            DenoiserInput(x_t=np.zeros((32, 32, 3)), t=1, lam=float("nan"))

    def test_non_finite_activation_names_the_site(self):
        self.models.unet.sites["mid.attn"].query.weight.data[:] = np.nan
        with self.assertRaises(NumericError) as ctx:
            self.denoiser(random_input(stream_for(5)))
        self.assertEqual(ctx.exception.site, "mid.attn")
        self.assertEqual(ctx.exception.exit_code, 4)


class AdapterTests(SimpleTestCase):
    def setUp(self):
        self.models = tiny_models()

    def test_adapter_starts_from_the_text_projections(self):
        for name in SITE_NAMES:
            site, twin = self.models.unet.sites[name], self.models.adapter.sites[name]
            np.testing.assert_array_equal(twin.key.weight.data, site.key.weight.data)
            np.testing.assert_array_equal(twin.value.weight.data, site.value.weight.data)
            self.assertIsNot(twin.key.weight, site.key.weight)

    def test_history_attention_without_fusion_is_zero(self):
        site = self.models.unet.sites["down1.attn"]
        latent = Tensor(np.ones((2, 5, site.channels), dtype=np.float32))
        zc = history_cross_attention(site, latent, None, self.models.adapter.sites["down1.attn"])
        self.assertEqual(zc.shape, (2, 5, site.channels))
        self.assertFalse(zc.data.any())

    def test_history_attention_needs_visible_rows(self):
        site = self.models.unet.sites["down1.attn"]
        latent = Tensor(np.ones((1, 5, site.channels), dtype=np.float32))
        fusion = random_fusion(stream_for(6), 1, 4, 8)
        fusion.mask[:] = False
        with self.assertRaises(EmptyContextError):
            history_cross_attention(site, latent, fusion, self.models.adapter.sites["down1.attn"])

    def test_mix(self):
        z = Tensor(np.ones((2, 3, 4)))
        zc = Tensor(np.full((2, 3, 4), 2.0))
        self.assertIs(mix(z, zc, 0.0), z)
        np.testing.assert_array_equal(mix(z, zc, 0.5).data, np.full((2, 3, 4), 2.0))
        rows = mix(z, zc, np.array([0.0, 1.0])).data
        np.testing.assert_array_equal(rows[0], 1.0)
        np.testing.assert_array_equal(rows[1], 3.0)
        with self.assertRaises(DimensionError):
            mix(z, Tensor(np.ones((2, 3, 5))), 1.0)


class FreezeTests(SimpleTestCase):
    def test_freeze_base(self):
        models = tiny_models()
        count = freeze_base(models.unet)
        self.assertEqual(count, models.unet.num_parameters())
        self.assertTrue(all(p.frozen and p.role == Role.FROZEN_BASE for p in models.unet.parameters()))
        self.assertFalse(any(p.frozen for p in models.adapter.parameters()))

    def test_adapter_parameters_are_prefixed(self):
        models = tiny_models()
        named = adapter_parameters(models.adapter, models.fusion)
        self.assertTrue(all(name.startswith(("adapter.", "fusion.")) for name, _ in named))
        self.assertEqual(
            sum(p.data.size for _, p in named), models.adapter.num_parameters() + models.fusion.num_parameters()
        )

    def test_base_weights_are_not_adapter_parameters(self):
        models = tiny_models()
        models.adapter.set_role(Role.FROZEN_BASE)
        with self.assertRaises(ValueError):
            adapter_parameters(models.adapter, models.fusion)

    def test_trainable_share_is_below_the_base(self):
        tiny = tiny_models()
        self.assertLess(trainable_ratio(tiny.adapter, tiny.fusion, tiny.unet), 1.0)
        default = build_models(build_config({}), with_adapter=True)
        self.assertLess(trainable_ratio(default.adapter, default.fusion, default.unet), 1.0)
        self.assertLess(default.adapter.num_parameters(), 0.1 * default.unet.num_parameters())


class DenoiserGradientTests(SimpleTestCase):
    def test_full_stack_gradients(self):
        rng = stream_for(7)
        with precision(np.float64):
            unet = UNet(RngStream(0, Stream.INIT), context_dim=8, channels=(8, 16), time_dim=8, groups=4, image_size=8)
            adapter = AdapterWeights(RngStream(1, Stream.INIT), unet)
            inp = random_input(rng, batch=2, lam=0.5, size=8)
            weight = rng.normal((2, 8, 8, 3))
            denoiser = Denoiser(unet, adapter)
            error = grad_check(
                lambda: (denoiser(inp) * weight).sum(),
                unet.parameters() + adapter.parameters(),
                coords_per_param=2,
                rng=rng,
            )
        self.assertLess(error, 1e-4)
