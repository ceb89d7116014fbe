import unittest

import numpy as np

from v2ir.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    count_parameters,
    discriminator_forward,
    generator_forward,
    layer_plan,
    parameter_shapes,
    sample_z,
    spec_from_dict,
    spec_to_dict,
)
from v2ir.numerics import ParamStore, Rng, Tensor, default_dtype, grad_check

# depth-4 unet, base width 16, RGB in, gray out, no z
UNET_GOLDEN_PARAMETERS = 387329


def tiny_unet(**kwargs):
    fields = dict(kind="unet", in_channels=1, out_channels=1, base_width=2, depth=1)
    fields.update(kwargs)
    return GeneratorSpec(**fields)


class TestParameterCounts(unittest.TestCase):
    def test_unet_golden_count(self):
        spec = GeneratorSpec(kind="unet", in_channels=3, out_channels=1, base_width=16, depth=4)
        self.assertEqual(count_parameters(spec), UNET_GOLDEN_PARAMETERS)
        self.assertEqual(build_generator(spec, Rng(0)).num_parameters(), UNET_GOLDEN_PARAMETERS)

    def test_closed_form_matches_built_models(self):
        specs = [
            GeneratorSpec(kind="resnet", base_width=4, res_blocks=2),
            GeneratorSpec(kind="unet", base_width=4, depth=3, z_mode="channel"),
            DiscriminatorSpec(conditional=True, widths=(8, 16)),
            DiscriminatorSpec(conditional=False, y_channels=3, widths=(4,)),
        ]
        for spec in specs:
            with self.subTest(spec=spec):
                builder = build_discriminator if isinstance(spec, DiscriminatorSpec) else build_generator
                model = builder(spec, Rng(1))
                self.assertEqual(model.num_parameters(), count_parameters(spec))
                self.assertEqual(
                    [(name, t.shape) for name, t in model.params],
                    [(name, tuple(shape)) for name, shape in parameter_shapes(spec)],
                )

    def test_discriminator_widths_repeat_last_entry(self):
        plan = layer_plan(DiscriminatorSpec(widths=(8, 16)))
        self.assertEqual([layer.out_channels for layer in plan], [8, 16, 16, 16, 1])
        self.assertEqual([layer.norm for layer in plan], [False, True, True, True, False])

    def test_z_channel_widens_first_layer(self):
        plan = layer_plan(GeneratorSpec(in_channels=3, z_mode="channel"))
        self.assertEqual(plan[0].in_channels, 4)


class TestInitialization(unittest.TestCase):
    def test_conv_weights_follow_init_distribution(self):
        spec = GeneratorSpec(kind="unet", in_channels=3, out_channels=1, base_width=16, depth=4)
        model = build_generator(spec, Rng(2, "init"))
        weights = np.concatenate(
            [t.data.reshape(-1) for name, t in model.params if name.endswith(".weight")]
        )
        self.assertAlmostEqual(float(weights.mean()), 0.0, delta=0.001)
        self.assertAlmostEqual(float(weights.std()), 0.02, delta=0.001)

    def test_norm_and_bias_init(self):
        model = build_generator(GeneratorSpec(kind="resnet", base_width=4, res_blocks=1), Rng(3))
        for name, t in model.params:
            if name.endswith(".bias") or name.endswith(".beta"):
                self.assertTrue(np.all(t.data == 0), name)
            if name.endswith(".gamma"):
                self.assertAlmostEqual(float(t.data.mean()), 1.0, delta=0.1)

    def test_same_rng_same_parameters(self):
        spec = GeneratorSpec(kind="unet", base_width=4, depth=2)
        a = build_generator(spec, Rng(9, "g"))
        b = build_generator(spec, Rng(9, "g"))
        c = build_generator(spec, Rng(10, "g"))
        self.assertEqual(a.params.digest(), b.params.digest())
        self.assertNotEqual(a.params.digest(), c.params.digest())


class TestForward(unittest.TestCase):
    def test_unet_shape_and_range(self):
        spec = GeneratorSpec(kind="unet", in_channels=3, out_channels=1, base_width=4, depth=3)
        g = build_generator(spec, Rng(0))
        x = Tensor(Rng(1).uniform(-1, 1, (2, 3, 16, 16)))
        out = generator_forward(g, x)
        self.assertEqual(out.shape, (2, 1, 16, 16))
        self.assertTrue(np.all(np.abs(out.data) < 1))

    def test_resnet_shape(self):
        spec = GeneratorSpec(kind="resnet", in_channels=1, out_channels=3, base_width=4, res_blocks=2)
        g = build_generator(spec, Rng(0))
        out = generator_forward(g, Tensor(Rng(1).uniform(-1, 1, (1, 1, 12, 12))))
        self.assertEqual(out.shape, (1, 3, 12, 12))

    def test_extents_must_be_divisible(self):
        spec = GeneratorSpec(kind="unet", base_width=4, depth=3)
        with self.assertRaises(ValueError):
            build_generator(spec, Rng(0), image_size=12)
        g = build_generator(spec, Rng(0))
        with self.assertRaises(ValueError):
            generator_forward(g, Tensor(np.zeros((1, 3, 12, 12))))

    def test_z_contract(self):
        channel = build_generator(tiny_unet(z_mode="channel"), Rng(0))
        plain = build_generator(tiny_unet(), Rng(0))
        x = Tensor(np.zeros((2, 1, 8, 8)))
        z = sample_z(channel.spec, 2, 8, 8, Rng(4))
        self.assertEqual(z.shape, (2, 1, 8, 8))
        self.assertIsNone(sample_z(plain.spec, 2, 8, 8, Rng(4)))
        self.assertEqual(generator_forward(channel, x, z).shape, (2, 1, 8, 8))
        with self.assertRaises(ValueError):
            generator_forward(channel, x)
        with self.assertRaises(ValueError):
            generator_forward(plain, x, z)

    def test_patch_discriminator(self):
        d = build_discriminator(DiscriminatorSpec(conditional=True, widths=(4, 8)), Rng(0))
        y = Tensor(np.zeros((2, 1, 32, 32)))
        x = Tensor(np.zeros((2, 3, 32, 32)))
        out = discriminator_forward(d, y, x)
        self.assertEqual(out.shape, (2, 1, 2, 2))
        self.assertTrue(np.all((out.data > 0) & (out.data < 1)))
        with self.assertRaises(ValueError):
            discriminator_forward(d, y)

    def test_unconditional_discriminator_rejects_x(self):
        d = build_discriminator(DiscriminatorSpec(conditional=False, widths=(4,)), Rng(0))
        y = Tensor(np.zeros((1, 1, 32, 32)))
        with self.assertRaises(ValueError):
            discriminator_forward(d, y, Tensor(np.zeros((1, 3, 32, 32))))

    def test_default_generators_keep_extents(self):
        for spec in (GeneratorSpec(), GeneratorSpec(kind="resnet")):
            g = build_generator(spec, Rng(5, spec.kind))
            for size in (32, 64):
                with self.subTest(kind=spec.kind, size=size):
                    x = Tensor(Rng(6).uniform(-1, 1, (1, 3, size, size)))
                    self.assertEqual(generator_forward(g, x).shape, (1, 1, size, size))

    def test_patch_map_of_64_pixel_input(self):
        d = build_discriminator(DiscriminatorSpec(conditional=True, widths=(4, 8)), Rng(0))
        out = discriminator_forward(d, Tensor(np.zeros((1, 1, 64, 64))), Tensor(np.zeros((1, 3, 64, 64))))
        self.assertEqual(out.shape, (1, 1, 6, 6))

    def test_forward_is_deterministic(self):
        g = build_generator(GeneratorSpec(kind="unet", base_width=4, depth=2), Rng(7))
        d = build_discriminator(DiscriminatorSpec(conditional=True, widths=(4, 8)), Rng(8))
        x = Tensor(Rng(9).uniform(-1, 1, (2, 3, 32, 32)))
        first, second = generator_forward(g, x), generator_forward(g, x)
        np.testing.assert_array_equal(first.data, second.data)
        np.testing.assert_array_equal(
            discriminator_forward(d, first, x).data, discriminator_forward(d, second, x).data
        )

    def test_different_z_gives_different_output(self):
        g = build_generator(tiny_unet(z_mode="channel"), Rng(10))
        x = Tensor(Rng(11).uniform(-1, 1, (1, 1, 8, 8)))
        first = generator_forward(g, x, sample_z(g.spec, 1, 8, 8, Rng(12, "z")))
        second = generator_forward(g, x, sample_z(g.spec, 1, 8, 8, Rng(13, "z")))
        self.assertFalse(np.array_equal(first.data, second.data))

    def test_skip_connection_carries_encoder_signal(self):
        """With every decoder weight zeroed except those reading enc1, the output still follows x."""
        spec = GeneratorSpec(kind="unet", in_channels=1, out_channels=1, base_width=4, depth=2)
        g = build_generator(spec, Rng(14))
        g.params["dec2.weight"].data[...] = 0
        from_below = g.layer("dec1").in_channels - g.layer("enc1").out_channels
        g.params["dec1.weight"].data[:from_below] = 0
        x1 = Tensor(Rng(15).uniform(-1, 1, (1, 1, 8, 8)))
        x2 = Tensor(Rng(16).uniform(-1, 1, (1, 1, 8, 8)))
        y1, y2 = generator_forward(g, x1).data, generator_forward(g, x2).data
        self.assertGreater(float(np.abs(y1 - y2).max()), 1e-6)

        g.params["dec1.weight"].data[...] = 0
        np.testing.assert_array_equal(generator_forward(g, x1).data, generator_forward(g, x2).data)


class TestGeneratorGradients(unittest.TestCase):
    """Both generator kinds at one level pass a 64-bit gradient check on 8x8 inputs."""

    def check(self, spec):
        with default_dtype(np.float64):
            g = build_generator(spec, Rng(21, "grad"))
            x = Tensor(Rng(22).uniform(-1, 1, (1, spec.in_channels, 8, 8)))
            u = Tensor(Rng(23).normal(0.0, 1.0, (1, spec.out_channels, 8, 8)))
            params = ParamStore()
            for name, t in g.params:
                params.add(name, t)

            def loss(_):
                return (generator_forward(g, x) * u).sum()

            error = grad_check(loss, params, eps=1e-6, max_coords=24, rng=Rng(24))
        self.assertLess(error, 1e-4)

    def test_unet(self):
        self.check(tiny_unet())

    def test_resnet(self):
        self.check(GeneratorSpec(kind="resnet", in_channels=1, out_channels=1, base_width=2, res_blocks=1))


class TestSpecSerialization(unittest.TestCase):
    def test_specs_survive_dict_form(self):
        for spec in (GeneratorSpec(kind="resnet", z_mode="none"), DiscriminatorSpec(widths=(8, 16))):
            self.assertEqual(spec_from_dict(spec_to_dict(spec)), spec)

    def test_invalid_specs(self):
        with self.assertRaises(ValueError):
            GeneratorSpec(kind="vgg")
        with self.assertRaises(ValueError):
            GeneratorSpec(z_mode="dropout")
        with self.assertRaises(ValueError):
            DiscriminatorSpec(widths=())


if __name__ == "__main__":
    unittest.main()
