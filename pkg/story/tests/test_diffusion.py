import numpy as np
from django.test import SimpleTestCase

from story.data.corpus import extract_four_tuples
from story.denoiser.adapter import Denoiser, DenoiserInput
from story.denoiser.unet import freeze_base
from story.diffusion.sampling import (
    SamplerConfig,
    cfg_combine,
    ddim_step,
    sample,
    sampling_timesteps,
    to_model_range,
    to_unit_range,
)
from story.diffusion.schedule import NoiseSchedule, forward_diffuse
from story.diffusion.training import embed_frames, embed_tuples, train_adapter, train_base, training_loss
from story.exceptions import ConfigError, NumericError
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor
from story.persistence.checkpoint import weights_hash

from .helpers import stream_for, tiny_corpus, tiny_models


class ScheduleTests(SimpleTestCase):
    def test_alpha_bars_decrease(self):
        schedule = NoiseSchedule(1000)
        self.assertTrue((np.diff(schedule.alpha_bars) < 0).all())
        self.assertAlmostEqual(schedule.betas[0], 1e-4)
        self.assertAlmostEqual(schedule.betas[-1], 0.02)
        self.assertLess(schedule.alpha_bars[-1], 1e-3)

    def test_invalid_schedules(self):
        with self.assertRaises(ValueError):
            NoiseSchedule(1)
        with self.assertRaises(ValueError):
            NoiseSchedule(10, beta_start=0.02, beta_end=0.01)

    def test_timestep_range(self):
        schedule = NoiseSchedule(10)
        with self.assertRaises(NumericError):
            forward_diffuse(np.zeros((2, 2)), 10, np.zeros((2, 2)), schedule)

    def test_per_row_timesteps(self):
        schedule = NoiseSchedule(50)
        x0 = np.ones((2, 4, 4, 3))
        eps = np.zeros_like(x0)
        x_t = forward_diffuse(x0, np.array([0, 49]), eps, schedule)
        np.testing.assert_allclose(x_t[0], schedule.sqrt_alpha_bars[0])
        np.testing.assert_allclose(x_t[1], schedule.sqrt_alpha_bars[49])


class DdimTests(SimpleTestCase):
    def setUp(self):
        self.schedule = NoiseSchedule(100)
        rng = stream_for(0)
        self.x0 = rng.uniform((4, 4, 3), low=-1.0, high=1.0)
        self.eps = rng.normal((4, 4, 3), dtype=np.float64)

    def test_exact_noise_recovers_the_clean_image(self):
        for t in (0, 37, 99):
            x_t = forward_diffuse(self.x0, t, self.eps, self.schedule)
            x_prev, x0_pred = ddim_step(x_t, self.eps, t, -1, self.schedule)
            np.testing.assert_allclose(x0_pred, self.x0, atol=1e-8)
            np.testing.assert_allclose(x_prev, self.x0, atol=1e-8)

    def test_deterministic_step_lands_on_the_forward_process(self):
        x_t = forward_diffuse(self.x0, 80, self.eps, self.schedule)
        x_prev, _ = ddim_step(x_t, self.eps, 80, 40, self.schedule)
        np.testing.assert_allclose(x_prev, forward_diffuse(self.x0, 40, self.eps, self.schedule), atol=1e-8)

    def test_step_cannot_go_forward(self):
        with self.assertRaises(NumericError):
            ddim_step(self.x0, self.eps, 10, 20, self.schedule)

    def test_stochastic_step_needs_noise(self):
        with self.assertRaises(ValueError):
            ddim_step(self.x0, self.eps, 50, 20, self.schedule, eta=1.0)


class TimestepTests(SimpleTestCase):
    def test_strictly_decreasing_from_the_top(self):
        steps = sampling_timesteps(50, 1000)
        self.assertEqual(len(steps), 50)
        self.assertEqual((steps[0], steps[-1]), (999, 0))
        self.assertTrue((np.diff(steps) < 0).all())

    def test_single_step(self):
        self.assertEqual(sampling_timesteps(1, 20).tolist(), [19])

    def test_too_many_steps(self):
        with self.assertRaises(ValueError):
            sampling_timesteps(30, 20)


class GuidanceTests(SimpleTestCase):
    def test_combination(self):
        uncond, cond = np.zeros(3), np.ones(3)
        self.assertIs(cfg_combine(uncond, cond, 1.0), cond)
        self.assertIs(cfg_combine(uncond, cond, 0.0), uncond)
        np.testing.assert_allclose(cfg_combine(uncond, cond, 5.0), np.full(3, 5.0))


class CountingDenoiser:
    def __init__(self, fail_on: int = None):
        self.calls = []
        self.fail_on = fail_on

    def __call__(self, inp: DenoiserInput) -> Tensor:
        self.calls.append(inp)
        if self.fail_on is not None and len(self.calls) == self.fail_on:
            raise NumericError("Non-finite values produced by matmul", site="mid.attn")
        return Tensor(np.full(inp.x_t.shape, 0.1))


class SampleTests(SimpleTestCase):
    def setUp(self):
        self.schedule = NoiseSchedule(20)

    def test_same_stream_same_image(self):
        config = SamplerConfig(steps=4, guidance_scale=3.0)
        first = sample(CountingDenoiser(), None, None, 0.0, config, self.schedule, rng=RngStream(1, Stream.SAMPLER))
        second = sample(CountingDenoiser(), None, None, 0.0, config, self.schedule, rng=RngStream(1, Stream.SAMPLER))
        other = sample(CountingDenoiser(), None, None, 0.0, config, self.schedule, rng=RngStream(2, Stream.SAMPLER))
        self.assertEqual(first.tobytes(), second.tobytes())
        self.assertFalse(np.array_equal(first, other))
        self.assertEqual(first.shape, (32, 32, 3))
        self.assertLessEqual(np.abs(first).max(), 1.0)

    def test_guidance_calls(self):
        guided = CountingDenoiser()
        sample(guided, None, None, 0.0, SamplerConfig(steps=3, guidance_scale=2.0), self.schedule)
        self.assertEqual(len(guided.calls), 6)
        self.assertIsNone(guided.calls[1].prompt)
        self.assertIsNone(guided.calls[1].fusion)
        single = CountingDenoiser()
        sample(single, None, None, 0.0, SamplerConfig(steps=3, guidance_scale=1.0), self.schedule)
        self.assertEqual(len(single.calls), 3)

    def test_failure_reports_the_step(self):
        failing = CountingDenoiser(fail_on=3)
        with self.assertRaises(NumericError) as ctx:
            sample(failing, None, None, 0.0, SamplerConfig(steps=5, guidance_scale=1.0), self.schedule)
        self.assertEqual(ctx.exception.step, 2)
        self.assertEqual(ctx.exception.site, "mid.attn")

    def test_stochastic_sampling_is_reproducible(self):
        config = SamplerConfig(steps=4, guidance_scale=1.0, eta=1.0)
        first = sample(CountingDenoiser(), None, None, 0.0, config, self.schedule, rng=RngStream(3, Stream.SAMPLER))
        second = sample(CountingDenoiser(), None, None, 0.0, config, self.schedule, rng=RngStream(3, Stream.SAMPLER))
        self.assertEqual(first.tobytes(), second.tobytes())

    def test_range_conversions(self):
        image = stream_for(1).uniform((4, 4, 3))
        np.testing.assert_allclose(to_unit_range(to_model_range(image)), image, atol=1e-6)
        self.assertEqual(to_unit_range(np.full(3, 5.0)).tolist(), [1.0, 1.0, 1.0])


class RecordingDenoiser:
    def __init__(self, inner):
        self.inner = inner
        self.inputs = []

    def __call__(self, inp: DenoiserInput) -> Tensor:
        self.inputs.append(inp)
        return self.inner(inp)


class TrainingLossTests(SimpleTestCase):
    def setUp(self):
        self.models = tiny_models()
        self.schedule = NoiseSchedule(20)
        self.tuples = extract_four_tuples(tiny_corpus(stories=1, frames=3))
        self.batch = embed_tuples(self.models.encoder, self.tuples)
        rng = stream_for(2)
        self.t = rng.integers(0, 20, size=2)
        self.noise = rng.normal(self.batch.x0.shape)

    def test_batches_are_in_model_range(self):
        frames = embed_frames(self.models.encoder, [self.tuples[0].caption], [self.tuples[0].image])
        self.assertEqual(frames.x0.shape, (1, 32, 32, 3))
        self.assertGreaterEqual(frames.x0.min(), -1.0)
        self.assertEqual(self.batch.history.length, 32 + 16)

    def test_dropped_rows_lose_prompt_and_history(self):
        recorder = RecordingDenoiser(self.models.denoiser())
        training_loss(
            self.batch, self.t, self.noise, self.schedule, recorder,
            fusion_model=self.models.fusion, lam=0.5, dropped=np.array([True, False]),
        )
        inp = recorder.inputs[0]
        self.assertEqual(inp.lam.tolist(), [0.0, 0.5])
        self.assertFalse(inp.prompt.mask[0].any())
        np.testing.assert_array_equal(inp.prompt.mask[1], self.batch.prompt.mask[1])

    def test_fully_dropped_batch_matches_the_base(self):
        loss = training_loss(
            self.batch, self.t, self.noise, self.schedule, self.models.denoiser(),
            fusion_model=self.models.fusion, lam=0.5, dropped=np.array([True, True]),
        )
        base = training_loss(
            self.batch, self.t, self.noise, self.schedule, self.models.denoiser(base_only=True),
            dropped=np.array([True, True]),
        )
        self.assertEqual(loss.item(), base.item())


class TrainingTests(SimpleTestCase):
    def setUp(self):
        self.corpus = tiny_corpus(stories=2, frames=3)

    def test_base_training_curve_and_checkpoints(self):
        models = tiny_models(with_adapter=False, base_steps=3, checkpoint_every=2)
        frames = [(f.caption, f.image) for record in self.corpus for f in record.frames]
        saved = []
        before = weights_hash(models.unet)
        curve = train_base(models.unet, models.encoder, frames, models.config, on_checkpoint=saved.append)
        self.assertEqual([p.step for p in curve], [0, 1, 2])
        self.assertTrue(all(p.stage == "base" and np.isfinite(p.loss) for p in curve))
        self.assertEqual(saved, [2])
        self.assertNotEqual(weights_hash(models.unet), before)

    def test_adapter_training_needs_a_frozen_base(self):
        models = tiny_models()
        with self.assertRaises(ConfigError):
            train_adapter(
                models.unet, models.adapter, models.fusion, models.encoder,
                extract_four_tuples(self.corpus), models.config,
            )

    def test_adapter_training_leaves_the_base_untouched(self):
        models = tiny_models(adapter_steps=2)
        freeze_base(models.unet)
        before_base = weights_hash(models.unet)
        before_adapter = weights_hash(models.adapter)
        points = []
        curve = train_adapter(
            models.unet, models.adapter, models.fusion, models.encoder,
            extract_four_tuples(self.corpus), models.config, on_point=points.append,
        )
        self.assertEqual(len(curve), 2)
        self.assertEqual(points, curve)
        self.assertEqual(weights_hash(models.unet), before_base)
        self.assertNotEqual(weights_hash(models.adapter), before_adapter)
