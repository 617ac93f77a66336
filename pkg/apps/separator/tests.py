import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigError, DimensionError, InputError, UsageError
from apps.dsp.signals import Waveform
from apps.separator.config import DecoderLayout, ModelConfig
from apps.separator.decoder import MotionCrossSublayer, MotionKeys
from apps.separator.inference import SourceCue, model_forward
from apps.separator.inspection import cosine_separation, pca_2d
from apps.separator.network import IQueryNet, MaskHead, predict_masks
from apps.separator.queries import QueryBank, assign_queries, visually_name
from apps.separator.unet import AudioUNet
from apps.tensorcore import ops
from apps.tensorcore.tensor import Tensor, default_dtype, no_grad
from apps.tensorcore.testing import gradient_check


def tiny_config(**overrides):
    values = dict(n_queries=3, channels=32, embed_dim=4, heads=4, unet_depth=3, base_channels=2,
                  freq_bins=16, frames=16, motion_frames=4, mask_hidden=32, ffn_mult=2)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_inputs(config, sources=2, seed=0):
    rng = np.random.default_rng(seed)
    features = rng.uniform(0.0, 1.0, (config.freq_bins, config.frames))
    objects = [rng.standard_normal(config.channels) / np.sqrt(config.channels) for _ in range(sources)]
    motions = [rng.standard_normal((config.channels, config.motion_frames)) for _ in range(sources)]
    return features, objects, motions


class Float64Mixin:
    def setUp(self):
        self._dtype = default_dtype(np.float64)
        self._dtype.__enter__()

    def tearDown(self):
        self._dtype.__exit__(None, None, None)


class ModelConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = ModelConfig()
        self.assertEqual((config.n_queries, config.channels, config.embed_dim, config.heads), (8, 256, 32, 8))
        self.assertEqual(config.audio_tokens, 64)

    def test_invariants(self):
        with self.assertRaises(ConfigError):
            ModelConfig(channels=250, heads=8)
        with self.assertRaises(ConfigError):
            ModelConfig(unet_depth=2)
        with self.assertRaises(ConfigError):
            ModelConfig(layout='transformer_xl')
        with self.assertRaises(ConfigError):
            ModelConfig(assignment='nearest')

    def test_text_round_trip_keys(self):
        text = ModelConfig(layout=DecoderLayout.SELF_AUDIO).to_text()
        self.assertIn('layout=self_audio\n', text)
        self.assertEqual(len(text.splitlines()), len(ModelConfig.field_names()))


class UNetTests(Float64Mixin, SimpleTestCase):
    def test_shape_contract_for_depths(self):
        x = np.random.default_rng(0).uniform(0, 1, (256, 256))
        for depth in (3, 4, 5):
            unet = AudioUNet(depth, 2, 16, 32, np.random.default_rng(depth))
            with no_grad():
                features, embeddings = unet(x)
            side = 256 // 2 ** depth
            self.assertEqual(features.shape, (16, side, side))
            self.assertEqual(embeddings.shape, (32, 256, 256))

    def test_full_width_bottleneck(self):
        unet = AudioUNet(5, 2, 256, 32, np.random.default_rng(1))
        with no_grad():
            features, _ = unet(np.zeros((256, 256)))
        self.assertEqual(features.shape, (256, 8, 8))
        self.assertFalse(np.any(features.data))

    def test_wrong_geometry(self):
        unet = AudioUNet(3, 2, 8, 4, np.random.default_rng(0))
        with self.assertRaises(DimensionError):
            unet(np.zeros((12, 16)))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        unet = AudioUNet(3, 2, 4, 3, rng).assign_names()
        x = Tensor(rng.uniform(-1, 1, (1, 16, 16)), requires_grad=True)
        w_features, w_embed = rng.standard_normal((4, 2, 2)), rng.standard_normal((3, 16, 16))

        def loss():
            features, embeddings = unet(x)
            return ops.add(ops.sum(ops.mul(features, w_features)), ops.sum(ops.mul(embeddings, w_embed)))

        params = [unet.down[0].weight, unet.bottleneck.weight, unet.up[0].weight, unet.head.bias]
        self.assertLess(gradient_check(loss, [x, *params], max_entries=12), 1e-3)


class QueryTests(Float64Mixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.bank = QueryBank(8, 4, np.random.default_rng(0))

    def test_zero_feature_is_identity(self):
        named = visually_name(self.bank, [(1, np.zeros(8))])
        np.testing.assert_array_equal(named.data, self.bank.weight.data)

    def test_assigned_column_is_exact_sum(self):
        feature = np.arange(8.0)
        named = visually_name(self.bank, [(2, feature)]).data
        np.testing.assert_array_equal(named[:, 2], self.bank.weight.data[:, 2] + feature)
        np.testing.assert_array_equal(named[:, [0, 1, 3]], self.bank.weight.data[:, [0, 1, 3]])

    def test_disjoint_assignments_commute(self):
        a, b = (0, np.ones(8)), (3, -np.ones(8))
        np.testing.assert_array_equal(visually_name(self.bank, [a, b]).data, visually_name(self.bank, [b, a]).data)

    def test_invalid_assignments(self):
        with self.assertRaises(InputError):
            visually_name(self.bank, [(4, np.zeros(8))])
        with self.assertRaises(InputError):
            visually_name(self.bank, [(1, np.zeros(8)), (1, np.ones(8))])
        with self.assertRaises(DimensionError):
            visually_name(self.bank, [(1, np.zeros(5))])

    def test_query_map_and_prompts(self):
        columns = self.bank.append_prompts([9, 12], np.random.default_rng(1))
        self.assertEqual(columns, [4, 5])
        self.assertEqual(self.bank.columns, 6)
        self.assertEqual(self.bank.column_for(12), 5)
        self.assertEqual(assign_queries(self.bank, [3, 9], 'visual'), [3, 4])
        with self.assertRaises(InputError):
            self.bank.column_for(7)
        with self.assertRaises(InputError):
            self.bank.append_prompts([9], np.random.default_rng(2))

    def test_random_assignment_draws_distinct_columns(self):
        picks = assign_queries(self.bank, [0, 1, 2], 'random', np.random.default_rng(3))
        self.assertEqual(len(set(picks)), 3)
        self.assertTrue(all(0 <= p < 4 for p in picks))


class HeadTests(Float64Mixin, SimpleTestCase):
    def test_identical_columns_identical_outputs(self):
        head = MaskHead(16, 16, 4, np.random.default_rng(0))
        row = np.random.default_rng(1).standard_normal(16)
        out = head(Tensor(np.stack([row, row, row]))).data
        self.assertEqual(out.shape, (4, 3))
        np.testing.assert_array_equal(out[:, 0], out[:, 2])

    def test_zero_final_layer(self):
        head = MaskHead(16, 16, 4, np.random.default_rng(0))
        head.fc3.weight.data[...] = 0.0
        out = head(Tensor(np.random.default_rng(2).standard_normal((5, 16)))).data
        self.assertFalse(np.any(out))

    def test_head_gradients(self):
        rng = np.random.default_rng(3)
        head = MaskHead(8, 8, 4, rng).assign_names()
        x = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        weights = rng.standard_normal((4, 3))
        err = gradient_check(lambda: ops.sum(ops.mul(head(x), weights)), [x, *head.parameters()])
        self.assertLess(err, 1e-4)

    def test_zero_embedding_gives_half(self):
        audio = np.random.default_rng(4).standard_normal((4, 5, 6))
        masks = predict_masks(Tensor(np.zeros((4, 2))), Tensor(audio)).data
        np.testing.assert_allclose(masks, 0.5)

    def test_bilinear_scaling(self):
        rng = np.random.default_rng(5)
        embed, audio = rng.standard_normal((4, 2)), rng.standard_normal((4, 3, 3))
        logit = lambda e: np.log(predict_masks(Tensor(e), Tensor(audio)).data) - \
            np.log1p(-predict_masks(Tensor(e), Tensor(audio)).data)
        np.testing.assert_allclose(logit(0.5 * embed), 0.5 * logit(embed), atol=1e-8)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(6)
        embed, audio = rng.standard_normal((3, 2)), rng.standard_normal((3, 4, 4))
        masks = predict_masks(Tensor(embed), Tensor(audio)).data
        expected = np.zeros((2, 4, 4))
        for i in range(2):
            for f in range(4):
                for t in range(4):
                    logit = sum(embed[c, i] * audio[c, f, t] for c in range(3))
                    expected[i, f, t] = 1.0 / (1.0 + np.exp(-logit))
        np.testing.assert_allclose(masks, expected, atol=1e-6)

    def test_channel_mismatch(self):
        with self.assertRaises(DimensionError):
            predict_masks(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 4, 4))))


class DecoderTests(Float64Mixin, SimpleTestCase):
    def test_single_motion_token_degenerates(self):
        rng = np.random.default_rng(0)
        layer = MotionCrossSublayer(16, 4, rng)
        token = Tensor(rng.standard_normal((1, 16)))
        out = layer(Tensor(rng.standard_normal((5, 16))), MotionKeys([token], {})).data
        expected = layer.attn.out_proj(layer.attn.v_proj(token)).data
        np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-12)

    def test_query_permutation_equivariance(self):
        for layout in DecoderLayout.values:
            config = tiny_config(layout=layout, n_queries=4)
            net = IQueryNet(config, seed=1)
            features, objects, motions = tiny_inputs(config)
            indices = [0, 2]
            with no_grad():
                base = net(features, objects, motions, indices)
            perm = np.array([2, 0, 3, 1])
            new_position = np.argsort(perm)
            net.queries.weight.data = net.queries.weight.data[:, perm]
            with no_grad():
                permuted = net(features, objects, motions, [int(new_position[i]) for i in indices])
            np.testing.assert_allclose(permuted.query_embeddings.data, base.query_embeddings.data[perm],
                                       atol=1e-6, err_msg=layout)
            np.testing.assert_allclose(permuted.masks.data, base.masks.data[perm], atol=1e-6, err_msg=layout)

    def test_motion_layout_needs_motion(self):
        config = tiny_config()
        net = IQueryNet(config, seed=0)
        features, _, _ = tiny_inputs(config)
        with self.assertRaises(UsageError):
            net(features, [], [], [])

    def test_self_audio_runs_without_motion(self):
        config = tiny_config(layout=DecoderLayout.SELF_AUDIO)
        features, _, _ = tiny_inputs(config)
        with no_grad():
            out = IQueryNet(config, seed=0)(features, [], [], [])
        self.assertEqual(out.masks.shape, (3, 16, 16))

    def test_full_network_gradients(self):
        config = tiny_config()
        net = IQueryNet(config, seed=2)
        features, objects, motions = tiny_inputs(config, seed=3)
        weights = np.random.default_rng(4).standard_normal((3, 16, 16))
        loss = lambda: ops.sum(ops.mul(net(features, objects, motions, [0, 2]).masks, weights))
        params = [
            net.queries.weight, net.audio_pos, net.motion_pos,
            net.decoder.layers[0].motion.attn.k_proj.weight,
            net.decoder.layers[1].self_attn.attn.q_proj.weight,
            net.decoder.layers[3].audio.attn.v_proj.weight,
            net.mask_head.fc1.weight, net.unet.head.weight,
        ]
        self.assertLess(gradient_check(loss, params, max_entries=8), 1e-3)

    def test_every_layout_shapes_and_gradients(self):
        for layout in DecoderLayout.values:
            with self.subTest(layout=layout):
                config = tiny_config(layout=layout)
                net = IQueryNet(config, seed=2)
                features, objects, motions = tiny_inputs(config, seed=3)
                with no_grad():
                    out = net(features, objects, motions, [0, 2])
                self.assertEqual(out.masks.shape, (3, 16, 16))
                self.assertEqual(out.query_embeddings.shape, (3, 32))
                weights = np.random.default_rng(4).standard_normal((3, 16, 16))
                loss = lambda: ops.sum(ops.mul(net(features, objects, motions, [0, 2]).masks, weights))
                params = [net.queries.weight, net.audio_pos] + [
                    p for name, p in net.named_parameters()
                    if name.startswith('decoder.layers.0.') and name.endswith('k_proj.weight')]
                if net.decoder.uses_motion:
                    params.append(net.motion_pos)
                self.assertLess(gradient_check(loss, params, max_entries=8), 1e-3)

    def test_layout_structure(self):
        for layout, parallel in [(DecoderLayout.SELF_MOTION_AUDIO, False), (DecoderLayout.DUAL_STREAM, True)]:
            layers = IQueryNet(tiny_config(layout=layout), seed=0).decoder.layers
            self.assertEqual(len(layers), 4)
            for layer in layers:
                self.assertIsNotNone(layer.self_attn)
                self.assertIsNotNone(layer.motion)
                self.assertIsNotNone(layer.audio)
                self.assertEqual(layer._parallel, parallel)

    def test_detached_unassigned_columns(self):
        config = tiny_config(n_queries=4)
        features, objects, motions = tiny_inputs(config)
        net = IQueryNet(config, seed=0)
        with no_grad():
            plain = net(features, objects, motions, [0, 2], columns=[0, 2])
            cut = net(features, objects, motions, [0, 2], columns=[0, 2], detach_unassigned=True)
        np.testing.assert_array_equal(cut.masks.data, plain.masks.data)

        ops.sum(net(features, objects, motions, [0, 2], columns=[0, 2], detach_unassigned=True).masks).backward()
        self.assertFalse(np.any(net.queries.weight.grad[:, [1, 3]]))
        self.assertTrue(np.any(net.queries.weight.grad[:, [0, 2]]))

        net.queries.weight.grad = None
        ops.sum(net(features, objects, motions, [0, 2], columns=[0, 2]).masks).backward()
        self.assertTrue(np.any(net.queries.weight.grad[:, 1]))

    def test_only_requested_columns_are_masked(self):
        config = tiny_config()
        net = IQueryNet(config, seed=0)
        features, objects, motions = tiny_inputs(config)
        with no_grad():
            full = net(features, objects, motions, [0, 1])
            part = net(features, objects, motions, [0, 1], columns=[1, 0])
        self.assertEqual(part.masks.shape, (2, 16, 16))
        np.testing.assert_allclose(part.masks.data[0], full.masks.data[1], atol=1e-12)


class PromptTests(SimpleTestCase):
    def test_desk_scale_trainable_count(self):
        net = IQueryNet(ModelConfig(), seed=0)
        with self.assertRaises(UsageError):
            net.add_audio_prompt([8])
        net.enter_finetune()
        columns = net.add_audio_prompt([8])
        self.assertEqual(columns, [8])
        self.assertEqual(net.queries.columns, 9)
        self.assertEqual(net.parameter_count(trainable_only=True), 2304)
        self.assertLess(net.trainable_fraction(), 0.01)
        self.assertTrue(all(not p.trainable for p in net.unet_parameters()))


class ModelForwardTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = ModelConfig(n_queries=4, channels=16, embed_dim=4, heads=2, unet_depth=3, base_channels=2,
                                 mask_hidden=16, ffn_mult=2)
        cls.net = IQueryNet(cls.config, seed=0)
        rng = np.random.default_rng(1)
        cls.mixture = Waveform(rng.uniform(-0.5, 0.5, 6 * 11025))
        cls.cues = [SourceCue(rng.standard_normal(16) / 4, rng.standard_normal((16, 64)), class_id=c)
                    for c in (1, 3)]

    def test_shapes_and_range(self):
        result = model_forward(self.net, self.mixture, self.cues)
        self.assertEqual(result.masks.shape, (4, 256, 256))
        self.assertTrue(np.all(np.isfinite(result.masks)))
        self.assertTrue(np.all((result.masks > 0) & (result.masks < 1)))
        self.assertEqual(result.query_indices, [1, 3])
        self.assertEqual([len(w) for w in result.waveforms], [len(self.mixture)] * 2)

    def test_swapping_sources_swaps_outputs(self):
        forward = model_forward(self.net, self.mixture, self.cues)
        swapped = model_forward(self.net, self.mixture, self.cues[::-1])
        np.testing.assert_allclose(swapped.waveforms[0].samples, forward.waveforms[1].samples, atol=1e-6)
        np.testing.assert_allclose(swapped.waveforms[1].samples, forward.waveforms[0].samples, atol=1e-6)


class InspectionTests(SimpleTestCase):
    def test_pca_recovers_dominant_axes(self):
        rng = np.random.default_rng(0)
        points = np.zeros((200, 5))
        points[:, 3] = rng.normal(0, 10.0, 200)
        points[:, 1] = rng.normal(0, 1.0, 200)
        coords, explained = pca_2d(points)
        centered = points - points.mean(axis=0)
        np.testing.assert_allclose(np.abs(coords[:, 0]), np.abs(centered[:, 3]), atol=1e-9)
        np.testing.assert_allclose(np.abs(coords[:, 1]), np.abs(centered[:, 1]), atol=1e-9)
        self.assertGreater(explained[0], 0.9)

    def test_pca_is_deterministic_under_sign(self):
        points = np.random.default_rng(1).standard_normal((30, 4))
        np.testing.assert_array_equal(pca_2d(points)[0], pca_2d(points.copy())[0])

    def test_pca_needs_two_points(self):
        with self.assertRaises(InputError):
            pca_2d(np.ones((1, 3)))

    def test_cosine_separation(self):
        embeddings = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
        intra, inter = cosine_separation(embeddings, [0, 0, 1, 1])
        self.assertAlmostEqual(intra, 1.0)
        self.assertAlmostEqual(inter, 0.0)
