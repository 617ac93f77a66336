import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigError, DimensionError, UsageError
from apps.tensorcore import ops
from apps.tensorcore.nn import FeedForward, LayerNorm, Linear, MultiheadAttention
from apps.tensorcore.optim import Adam, AdamW, MultiStepSchedule
from apps.tensorcore.tensor import Parameter, Tape, Tensor, backward, default_dtype, no_grad
from apps.tensorcore.testing import gradient_check

PER_OP_TOL = 1e-4


def _away_from_zero(rng, shape):
    """Random values with |x| ≥ 0.1 so kinks (relu, abs) are never straddled."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + 0.1)


class GradCheckMixin:
    def setUp(self):
        self._dtype = default_dtype(np.float64)
        self._dtype.__enter__()

    def tearDown(self):
        self._dtype.__exit__(None, None, None)

    def leaf(self, array):
        return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class MatmulTests(GradCheckMixin, SimpleTestCase):
    def test_identity_product(self):
        b = np.arange(12.0).reshape(3, 4)
        out = ops.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_computed(self):
        out = ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        self.assertIn('(2, 3)', str(ctx.exception))
        self.assertIn('(4, 5)', str(ctx.exception))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = self.leaf(rng.standard_normal((4, 5))), self.leaf(rng.standard_normal((5, 3)))
        weights = rng.standard_normal((4, 3))
        err = gradient_check(lambda: ops.sum(ops.mul(ops.matmul(a, b), weights)), [a, b])
        self.assertLess(err, PER_OP_TOL)

    def test_batched_gradients(self):
        rng = np.random.default_rng(1)
        a, b = self.leaf(rng.standard_normal((2, 3, 4))), self.leaf(rng.standard_normal((2, 4, 5)))
        weights = rng.standard_normal((2, 3, 5))
        err = gradient_check(lambda: ops.sum(ops.mul(ops.matmul(a, b), weights)), [a, b])
        self.assertLess(err, PER_OP_TOL)


class ElementwiseTests(GradCheckMixin, SimpleTestCase):
    def test_sigmoid_of_zero(self):
        self.assertEqual(ops.elementwise('sigmoid', Tensor(0.0)).item(), 0.5)

    def test_relu_values(self):
        out = ops.elementwise('relu', Tensor([-3.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_leaky_relu_slope(self):
        out = ops.elementwise('leaky_relu', Tensor([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    def test_unknown_kind(self):
        with self.assertRaises(UsageError):
            ops.elementwise('gelu', Tensor(1.0))

    def test_incompatible_broadcast(self):
        with self.assertRaises(DimensionError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))

    def test_unary_kinds_over_twenty_seeds(self):
        for kind in ('relu', 'leaky_relu', 'sigmoid'):
            for seed in range(20):
                rng = np.random.default_rng(seed)
                x = self.leaf(_away_from_zero(rng, (3, 4)))
                weights = rng.standard_normal((3, 4))
                err = gradient_check(lambda: ops.sum(ops.mul(ops.elementwise(kind, x), weights)), [x])
                self.assertLess(err, PER_OP_TOL, f'{kind} seed {seed}')

    def test_log1p_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = self.leaf(rng.uniform(0.1, 2.0, (3, 4)))
            err = gradient_check(lambda: ops.sum(ops.elementwise('log1p', x)), [x])
            self.assertLess(err, PER_OP_TOL)

    def test_binary_kinds_with_broadcast(self):
        for kind in ('add', 'mul'):
            for seed in range(20):
                rng = np.random.default_rng(seed)
                a, b = self.leaf(rng.standard_normal((3, 4))), self.leaf(rng.standard_normal((1, 4)))
                weights = rng.standard_normal((3, 4))
                err = gradient_check(lambda: ops.sum(ops.mul(ops.elementwise(kind, a, b), weights)), [a, b])
                self.assertLess(err, PER_OP_TOL, f'{kind} seed {seed}')

    def test_division_and_sqrt(self):
        rng = np.random.default_rng(3)
        a, b = self.leaf(rng.standard_normal((2, 3))), self.leaf(rng.uniform(0.5, 2.0, (2, 3)))
        err = gradient_check(lambda: ops.sum(ops.div(a, ops.sqrt(b))), [a, b])
        self.assertLess(err, PER_OP_TOL)


class SoftmaxTests(GradCheckMixin, SimpleTestCase):
    def test_uniform_logits(self):
        out = ops.softmax(Tensor(np.zeros(4)), axis=0)
        np.testing.assert_allclose(out.data, [0.25] * 4)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_allclose(ops.softmax(Tensor(x)).data, ops.softmax(Tensor(x + 7.5)).data, atol=1e-12)

    def test_extreme_logits_still_normalized(self):
        x = np.array([[1e4, -1e4, 0.0, 1e4], [-1e4, -1e4, -1e4, -1e4]])
        out = ops.softmax(Tensor(x), axis=-1)
        self.assertTrue(np.all(out.data >= 0))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = self.leaf(rng.standard_normal((3, 6)))
            weights = rng.standard_normal((3, 6))
            err = gradient_check(lambda: ops.sum(ops.mul(ops.softmax(x, axis=-1), weights)), [x])
            self.assertLess(err, PER_OP_TOL)

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(5)
        x = self.leaf(rng.standard_normal((2, 7)))
        weights = rng.standard_normal((2, 7))
        err = gradient_check(lambda: ops.sum(ops.mul(ops.log_softmax(x), weights)), [x])
        self.assertLess(err, PER_OP_TOL)


class LayerNormTests(GradCheckMixin, SimpleTestCase):
    def test_constant_input_normalizes_to_zero(self):
        out = ops.layer_norm(Tensor(np.full((2, 8), 3.0)), np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_standardized_input_unchanged(self):
        x = np.random.default_rng(0).standard_normal((4, 16))
        x = (x - x.mean(axis=-1, keepdims=True)) / x.std(axis=-1, keepdims=True)
        out = ops.layer_norm(Tensor(x), np.ones(16), np.zeros(16))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_output_moments(self):
        x = np.random.default_rng(1).standard_normal((5, 32)) * 4 + 2
        out = ops.layer_norm(Tensor(x), np.ones(32), np.zeros(32)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = self.leaf(rng.standard_normal((3, 6)))
            gain, bias = self.leaf(rng.standard_normal(6)), self.leaf(rng.standard_normal(6))
            weights = rng.standard_normal((3, 6))
            err = gradient_check(lambda: ops.sum(ops.mul(ops.layer_norm(x, gain, bias), weights)), [x, gain, bias])
            self.assertLess(err, PER_OP_TOL)


class ConvTests(GradCheckMixin, SimpleTestCase):
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 5, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_transpose_of_delta_reproduces_kernel(self):
        kernel = np.arange(9.0).reshape(1, 1, 3, 3)
        delta = np.ones((1, 1, 1))
        out = ops.conv_transpose2d(Tensor(delta), Tensor(kernel))
        np.testing.assert_array_equal(out.data[0], kernel[0, 0])

    def test_transpose_is_adjoint(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((3, 2, 4, 4))
        y = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        cotangent = rng.standard_normal(y.shape)
        back = ops.conv_transpose2d(Tensor(cotangent), Tensor(w), stride=2, pad=1).data
        self.assertEqual(back.shape, x.shape)
        self.assertAlmostEqual(float(np.sum(y * cotangent)), float(np.sum(x * back)), places=9)

    def test_transpose_shape_inverts_forward(self):
        out = ops.conv_transpose2d(Tensor(np.ones((4, 8, 8))), Tensor(np.ones((4, 2, 4, 4))), stride=2, pad=1)
        self.assertEqual(out.shape, (2, 16, 16))

    def test_invalid_geometry(self):
        with self.assertRaises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
        with self.assertRaises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=0)
        with self.assertRaises(DimensionError):
            ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_conv_gradients(self):
        rng = np.random.default_rng(3)
        x = self.leaf(rng.standard_normal((2, 8, 8)))
        w = self.leaf(rng.standard_normal((3, 2, 4, 4)))
        b = self.leaf(rng.standard_normal(3))
        weights = rng.standard_normal((3, 4, 4))
        err = gradient_check(lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=2, pad=1), weights)), [x, w, b])
        self.assertLess(err, PER_OP_TOL)

    def test_conv_transpose_gradients(self):
        rng = np.random.default_rng(4)
        x = self.leaf(rng.standard_normal((2, 4, 4)))
        w = self.leaf(rng.standard_normal((2, 3, 4, 4)))
        b = self.leaf(rng.standard_normal(3))
        weights = rng.standard_normal((3, 8, 8))
        err = gradient_check(
            lambda: ops.sum(ops.mul(ops.conv_transpose2d(x, w, b, stride=2, pad=1), weights)), [x, w, b])
        self.assertLess(err, PER_OP_TOL)


class AttentionTests(GradCheckMixin, SimpleTestCase):
    def test_heads_must_divide_channels(self):
        with self.assertRaises(ConfigError):
            MultiheadAttention(30, 8, np.random.default_rng(0))

    def test_single_key_ignores_queries(self):
        rng = np.random.default_rng(0)
        attn = MultiheadAttention(16, 4, rng)
        kv = Tensor(rng.standard_normal((1, 16)))
        out = attn(Tensor(rng.standard_normal((5, 16))), kv, kv).data
        expected = attn.out_proj(attn.v_proj(kv)).data
        np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-12)

    def test_key_value_permutation_invariance(self):
        rng = np.random.default_rng(1)
        attn = MultiheadAttention(16, 4, rng)
        q = Tensor(rng.standard_normal((3, 16)))
        kv = rng.standard_normal((6, 16))
        perm = rng.permutation(6)
        a = attn(q, Tensor(kv), Tensor(kv)).data
        b = attn(q, Tensor(kv[perm]), Tensor(kv[perm])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradients_over_all_projections(self):
        rng = np.random.default_rng(2)
        attn = MultiheadAttention(8, 2, rng).assign_names()
        q = self.leaf(rng.standard_normal((3, 8)))
        kv = self.leaf(rng.standard_normal((4, 8)))
        weights = rng.standard_normal((3, 8))
        err = gradient_check(lambda: ops.sum(ops.mul(attn(q, kv, kv), weights)), [q, kv, *attn.parameters()])
        self.assertLess(err, PER_OP_TOL)

    def test_sublayer_modules(self):
        rng = np.random.default_rng(3)
        block_norm, ffn = LayerNorm(8), FeedForward(8, 32, rng)
        x = self.leaf(rng.standard_normal((3, 8)))
        err = gradient_check(lambda: ops.sum(ffn(block_norm(x))), [x, *ffn.parameters()])
        self.assertLess(err, PER_OP_TOL)


class BackwardTests(GradCheckMixin, SimpleTestCase):
    def test_sum_gives_ones(self):
        x = self.leaf(np.arange(6.0).reshape(2, 3))
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_unrelated_loss_leaves_no_gradient(self):
        x = self.leaf(np.ones(3))
        y = self.leaf(np.ones(3))
        ops.sum(y).backward()
        self.assertIsNone(x.grad)

    def test_multiplied_by_zero_gives_zeros(self):
        x = self.leaf(np.ones(3))
        ops.sum(ops.mul(x, 0.0)).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = self.leaf(np.ones(3))
        with self.assertRaises(UsageError):
            backward(ops.mul(x, 2.0))

    def test_repeated_backward_accumulates(self):
        x = self.leaf(np.ones(3))
        loss = ops.sum(ops.mul(x, 3.0))
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 6.0))

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x = self.leaf(rng.standard_normal((3, 4)))
        f = lambda: ops.sum(ops.square(x))
        g = lambda: ops.sum(ops.sigmoid(x))
        ops.add(f(), g()).backward()
        joint = x.grad.copy()
        x.grad = None
        f().backward()
        g().backward()
        np.testing.assert_allclose(joint, x.grad, atol=1e-6)

    def test_tape_is_topological(self):
        x = self.leaf(np.ones(2))
        a = ops.mul(x, 2.0)
        loss = ops.sum(ops.add(a, ops.square(a)))
        tape = Tape.from_loss(loss)
        position = {id(t): i for i, t in enumerate(tape)}
        self.assertEqual(len(position), len(tape))
        for t in tape:
            for parent, _ in t._node.parents:
                if not parent.is_leaf:
                    self.assertLess(position[id(parent)], position[id(t)])

    def test_no_grad_records_nothing(self):
        x = self.leaf(np.ones(2))
        with no_grad():
            y = ops.mul(x, 2.0)
        self.assertFalse(y.requires_grad)

    def test_take_and_concat_gradients(self):
        rng = np.random.default_rng(5)
        x = self.leaf(rng.standard_normal((4, 3)))
        y = self.leaf(rng.standard_normal((2, 3)))
        weights = rng.standard_normal((5, 3))
        err = gradient_check(
            lambda: ops.sum(ops.mul(ops.take(ops.concat([x, y], axis=0), [0, 5, 2, 2, 4]), weights)), [x, y])
        self.assertLess(err, PER_OP_TOL)


class OptimizerTests(SimpleTestCase):
    def test_first_adam_step_moves_by_lr(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]), name='p', dtype=np.float64)
        p.grad = np.array([0.5, -4.0, 2.0])
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, -1.99, 2.99], atol=1e-7)

    def test_frozen_parameter_is_bit_identical(self):
        rng = np.random.default_rng(0)
        frozen = Parameter(rng.standard_normal(5), name='frozen', trainable=False)
        live = Parameter(rng.standard_normal(5), name='live')
        before, live_before = frozen.data.copy(), live.data.copy()
        opt = AdamW([frozen, live], lr=1e-3, weight_decay=1e-4)
        for _ in range(100):
            frozen.grad = rng.standard_normal(5).astype(frozen.dtype)
            live.grad = rng.standard_normal(5).astype(live.dtype)
            opt.step()
        self.assertEqual(frozen.data.tobytes(), before.tobytes())
        self.assertNotEqual(live.data.tobytes(), live_before.tobytes())

    def test_adamw_pure_decay(self):
        theta = np.array([1.0, -2.0, 0.5])
        p = Parameter(theta, name='p', dtype=np.float64)
        p.grad = np.zeros(3)
        AdamW([p], lr=0.1, weight_decay=1e-2).step()
        np.testing.assert_allclose(p.data, theta * (1 - 0.1 * 1e-2), rtol=1e-12)

    def test_non_positive_lr_rejected(self):
        with self.assertRaises(ConfigError):
            Adam([], lr=0.0)

    def test_multistep_schedule(self):
        schedule = MultiStepSchedule(1e-4, (30, 50))
        self.assertAlmostEqual(schedule.lr_at(29), 1e-4)
        self.assertAlmostEqual(schedule.lr_at(30), 1e-5)
        self.assertAlmostEqual(schedule.lr_at(55), 1e-6)

    def test_linear_layer_trains(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(1)
            layer = Linear(3, 1, rng).assign_names()
            x = Tensor(rng.standard_normal((32, 3)))
            target = x.data @ np.array([[1.0], [-2.0], [0.5]])
            opt = Adam(layer.parameters(), lr=0.05)
            for _ in range(300):
                opt.zero_grad()
                loss = ops.mean(ops.square(ops.sub(layer(x), target)))
                loss.backward()
                opt.step()
            self.assertLess(loss.item(), 1e-2)
