import math

import numpy as np
import pytest

from errors import FormatError, InvalidParameterError, InvalidShapeError, NumericError, ShapeMismatchError
from gradcheck import conv_oracle, normwise_error
from nn import (
    DROPOUT_STUDY,
    PRESETS,
    ArchitectureSpec,
    DropoutParadigm,
    LayerDesc,
    build_preset,
    conv2d_backward,
    conv2d_forward,
    count_parameters,
    dense_forward,
    dropout_backward,
    dropout_forward,
    init_parameters,
    maxpool2x2_backward,
    maxpool2x2_forward,
    model_backward,
    model_forward,
    parameter_shapes,
    parameter_table,
    regular_after_fc,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
    spatial_at_pools,
)
from tensor import make_rng


DROPOUT_RATES = [0.125, 0.25, 0.4, 0.8]


def _kinds(spec, kind):
    return [layer for layer in spec.layers if layer.kind == kind]


# =============================================================================
# Layer math
# =============================================================================

class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        assert np.array_equal(conv2d_forward(x, w, np.zeros(2)), x)

    def test_zero_weights_give_bias(self):
        y = conv2d_forward(np.ones((2, 3, 5, 5)), np.zeros((1, 3, 3, 3)), np.array([1.25]))
        assert np.all(y == 1.25)

    def test_non_finite_input_rejected(self):
        x = np.ones((1, 2, 4, 4))
        x[0, 1, 2, 2] = np.inf
        with pytest.raises(NumericError):
            conv2d_forward(x, np.zeros((1, 2, 3, 3)), np.zeros(1))
        with pytest.raises(NumericError):
            conv2d_backward(x, np.ones((1, 2, 3, 3)), np.ones((1, 1, 4, 4)))
        with pytest.raises(NumericError):
            dense_forward(np.array([[np.nan, 1.0]]), np.ones((2, 3)), np.zeros(3))

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        expected = conv_oracle(x, w, b)
        assert normwise_error(conv2d_forward(x, w, b), expected) < 1e-12

    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        x, w = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((4, 2, 3, 3))
        for g in conv2d_backward(x, w, np.zeros((2, 4, 3, 3))):
            assert np.all(g == 0)

    def test_bias_gradient_of_sum(self):
        x, w = np.ones((2, 1, 3, 4)), np.ones((5, 1, 3, 3))
        _, _, db = conv2d_backward(x, w, np.ones((2, 5, 3, 4)))
        assert np.all(db == 2 * 3 * 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


class TestPool:
    def test_block_max_and_index(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, idx = maxpool2x2_forward(x)
        assert y.tolist() == [[[[4.0]]]]
        assert idx.tolist() == [[[[3]]]]

    def test_ties_go_to_top_left(self):
        x = np.full((1, 1, 4, 4), 2.0)
        y, idx = maxpool2x2_forward(x)
        assert np.all(y == 2.0)
        assert idx.ravel().tolist() == [0, 2, 8, 10]

    def test_odd_input_rejected(self):
        with pytest.raises(InvalidShapeError):
            maxpool2x2_forward(np.ones((1, 1, 3, 4)))

    def test_backward_conserves_mass(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 4))
        _, idx = maxpool2x2_forward(x)
        dy = rng.standard_normal((2, 3, 3, 2))
        dx = maxpool2x2_backward(dy, idx, x.shape)
        assert math.isclose(dx.sum(), dy.sum(), rel_tol=1e-12)
        assert np.count_nonzero(dx) == dy.size
        assert np.all(maxpool2x2_backward(np.zeros_like(dy), idx, x.shape) == 0)

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_every_pool_keeps_a_quarter(self, name):
        spec = build_preset(name)
        shapes = [spec.input_shape] + spec.shapes()
        pools = [i for i, layer in enumerate(spec.layers) if layer.kind == "pool"]
        assert pools
        for i in pools:
            assert 4 * np.prod(shapes[i + 1]) == np.prod(shapes[i])


class TestRelu:
    def test_nonnegative_identity(self):
        x = np.array([0.0, 1.0, 3.5])
        assert np.array_equal(relu_forward(x), x)

    def test_sign_cases(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert relu_forward(x).tolist() == [0.0, 0.0, 2.0]
        assert relu_backward(np.full(3, 5.0), x).tolist() == [0.0, 0.0, 5.0]


class TestDropout:
    @pytest.mark.parametrize("mode", ["regular", "spatial"])
    def test_zero_rate_is_identity(self, mode):
        x = np.random.default_rng(4).standard_normal((2, 3, 4, 4))
        y, mask = dropout_forward(x, 0.0, mode, make_rng(0), True)
        assert np.array_equal(y, x)
        assert np.all(mask == 1)

    def test_eval_mode_is_identity(self):
        x = np.random.default_rng(5).standard_normal((2, 8))
        y, _ = dropout_forward(x, 0.8, "regular", None, False)
        assert np.array_equal(y, x)

    @pytest.mark.parametrize("rate", DROPOUT_RATES)
    def test_inverted_scaling_keeps_the_mean(self, rate):
        v = 2.0
        y, _ = dropout_forward(np.full(100_000, v), rate, "regular", make_rng(1), True)
        assert abs(y.mean() - v) / v < 0.02
        kept = y[y != 0]
        assert np.allclose(kept, v / (1 - rate))

    @pytest.mark.parametrize("rate", DROPOUT_RATES)
    def test_spatial_drops_whole_channels(self, rate):
        x = np.ones((100, 100, 2, 2))
        y, mask = dropout_forward(x, rate, "spatial", make_rng(2), True)
        assert mask.shape == (100, 100, 1, 1)
        flat = y.reshape(100, 100, 4)
        assert np.all(flat.min(axis=2) == flat.max(axis=2))
        zeroed = np.mean(flat[:, :, 0] == 0)
        sigma = math.sqrt(rate * (1 - rate) / 10_000)
        assert abs(zeroed - rate) <= 3 * sigma

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            dropout_forward(np.ones((2, 2)), 0.5, "regular", None, True)

    def test_rate_one_rejected(self):
        with pytest.raises(InvalidParameterError):
            dropout_forward(np.ones((2, 2)), 1.0, "regular", make_rng(0), True)

    def test_backward_with_fixed_masks(self):
        dy = np.random.default_rng(6).standard_normal((2, 3, 2, 2))
        assert np.array_equal(dropout_backward(dy, np.ones((2, 3, 2, 2))), dy)
        assert np.all(dropout_backward(dy, np.zeros((2, 3, 1, 1))) == 0)


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        assert np.array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)

    def test_hand_example(self):
        y = dense_forward(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
        assert y.tolist() == [[6.0]]


class TestSoftmax:
    def test_uniform_logits(self):
        loss, probs = softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
        assert math.isclose(loss, math.log(10), rel_tol=1e-12)
        assert np.allclose(probs, 0.1)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((4, 5))
        labels = np.array([0, 1, 2, 3])
        shifted = logits + rng.standard_normal((4, 1)) * 10
        a, pa = softmax_cross_entropy(logits, labels)
        b, pb = softmax_cross_entropy(shifted, labels)
        assert math.isclose(a, b, rel_tol=1e-10)
        assert np.allclose(pa, pb, rtol=1e-10)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((6, 10)) * 3
        labels = rng.integers(0, 10, size=6)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.mean(np.log(probs[np.arange(6), labels]))
        loss, _ = softmax_cross_entropy(logits, labels)
        assert abs(loss - expected) / expected < 1e-10

    def test_backward_perfect_prediction_is_zero(self):
        probs = np.eye(3)
        assert np.all(softmax_cross_entropy_backward(probs, np.array([0, 1, 2]), 3) == 0)

    def test_backward_rows_sum_to_zero(self):
        _, probs = softmax_cross_entropy(np.random.default_rng(9).standard_normal((5, 4)), np.arange(5) % 4)
        d = softmax_cross_entropy_backward(probs, np.arange(5) % 4, 5)
        assert np.allclose(d.sum(axis=1), 0.0, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidParameterError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


# =============================================================================
# Presets and architecture text
# =============================================================================

class TestPresets:
    def test_mnist(self):
        spec = build_preset("mnist")
        assert len(_kinds(spec, "conv")) == 4
        assert [d.size for d in _kinds(spec, "dense")] == [2048, 2048]
        assert [(d.rate, d.mode) for d in _kinds(spec, "dropout")] == [(0.8, "regular")] * 2
        assert spec.output_classes == 10

    def test_mnist_spatial_bookkeeping(self):
        spec = build_preset("mnist")
        pooled = [shape for layer, shape in zip(spec.layers, spec.shapes()) if layer.kind == "pool"]
        assert [s[1:] for s in pooled] == [(14, 14), (7, 7)]

    def test_cifar10_regular_dropout_after_every_pool(self):
        spec = build_preset("cifar10")
        layers = spec.layers
        for i, layer in enumerate(layers):
            if layer.kind == "pool":
                assert layers[i + 1] == LayerDesc("dropout", rate=0.25, mode="regular")

    def test_svhn_head(self):
        spec = build_preset("svhn")
        assert [d.size for d in _kinds(spec, "dense")] == [1024, 1024]
        fc_dropout = [layers for layers in _kinds(spec, "dropout") if layers.rate == 0.4]
        assert len(fc_dropout) == 2

    @pytest.mark.parametrize("name,convs", [("mnist", 4), ("cifar10", 11), ("cifar100", 11), ("svhn", 11), ("stl10", 13)])
    def test_conv_counts(self, name, convs):
        assert len(_kinds(build_preset(name), "conv")) == convs

    def test_relu_follows_every_conv_and_dense(self):
        spec = build_preset("cifar100")
        for i, layer in enumerate(spec.layers):
            if layer.kind in ("conv", "dense"):
                assert spec.layers[i + 1].kind == "relu"

    def test_spatial_before_pool_paradigm(self):
        spec = build_preset("mnist", paradigm=spatial_at_pools(0.125))
        layers = spec.layers
        for i, layer in enumerate(layers):
            if layer.kind == "pool":
                assert layers[i - 1] == LayerDesc("dropout", rate=0.125, mode="spatial")
        assert all(d.mode == "spatial" for d in _kinds(spec, "dropout"))

    def test_study_paradigms_build(self):
        for paradigm in DROPOUT_STUDY.values():
            build_preset("mnist", paradigm=paradigm)

    def test_overrides(self):
        spec = build_preset("mnist", paradigm=regular_after_fc(0.5), widths=[8, 8], fc_width=32)
        assert [d.size for d in _kinds(spec, "conv")] == [8, 8]
        assert [d.size for d in _kinds(spec, "dense")] == [32, 32]

    def test_unknown_preset(self):
        with pytest.raises(InvalidParameterError):
            build_preset("imagenet")

    def test_unknown_paradigm(self):
        with pytest.raises(InvalidParameterError):
            DropoutParadigm("everywhere")

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_text_round_trip(self, name):
        spec = build_preset(name)
        assert ArchitectureSpec.from_text(spec.to_text()) == spec

    def test_bad_text(self):
        with pytest.raises(FormatError):
            ArchitectureSpec.from_text("name x\ninput 1 4 4\nconv\nsoftmax 2\n")
        with pytest.raises(FormatError):
            ArchitectureSpec.from_text("input 1 4 4\nsoftmax 2\n")

    def test_softmax_must_be_last(self):
        with pytest.raises(InvalidShapeError):
            ArchitectureSpec("x", (1, 4, 4), (LayerDesc("flatten"), LayerDesc("softmax", size=2), LayerDesc("relu")))


# =============================================================================
# Parameters
# =============================================================================

class TestParameters:
    def test_same_seed_same_parameters(self, tiny_spec):
        a = init_parameters(tiny_spec, make_rng(4))
        b = init_parameters(tiny_spec, make_rng(4))
        for i in a:
            for key in ("w", "b"):
                assert np.array_equal(a[i][key], b[i][key])

    def test_biases_zero(self, tiny_spec):
        for p in init_parameters(tiny_spec, make_rng(0)).values():
            assert np.all(p["b"] == 0)

    def test_he_scale(self):
        spec = ArchitectureSpec("he", (16, 4, 4), (
            LayerDesc("conv", size=128), LayerDesc("flatten"), LayerDesc("softmax", size=2),
        ))
        w = init_parameters(spec, make_rng(1))[0]["w"]
        expected = math.sqrt(2.0 / (9 * 16))
        assert abs(w.std() - expected) / expected < 0.05

    def test_dense_count_closed_form(self):
        spec = ArchitectureSpec("d", (64, 7, 7), (
            LayerDesc("flatten"), LayerDesc("dense", size=2048), LayerDesc("softmax", size=2),
        ))
        table = parameter_table(spec)
        assert table.loc[table["layer"] == "dense 2048", "params"].item() == 3136 * 2048 + 2048

    def test_mnist_count(self):
        assert count_parameters(build_preset("mnist")) > 1_400_000

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_table_sums_to_total(self, name):
        spec = build_preset(name)
        assert parameter_table(spec)["params"].sum() == count_parameters(spec)


# =============================================================================
# Whole model
# =============================================================================

class TestModel:
    def test_mnist_logits_shape_and_eval_determinism(self):
        spec = build_preset("mnist")
        params = init_parameters(spec, make_rng(0))
        x = np.random.default_rng(0).random((2, 1, 28, 28)).astype(np.float32)
        a, cache = model_forward(spec, params, x)
        b, _ = model_forward(spec, params, x)
        assert a.shape == (2, 10)
        assert cache is None
        assert np.array_equal(a, b)

    def test_input_shape_checked(self, tiny_spec):
        params = init_parameters(tiny_spec, make_rng(0))
        with pytest.raises(ShapeMismatchError):
            model_forward(tiny_spec, params, np.zeros((1, 1, 5, 5), dtype=np.float32))

    def test_backward_needs_training_cache(self, tiny_spec):
        params = init_parameters(tiny_spec, make_rng(0))
        _, cache = model_forward(tiny_spec, params, np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeMismatchError):
            model_backward(tiny_spec, params, cache, np.zeros((1, 3), dtype=np.float32))

    def test_zero_upstream(self, tiny_spec):
        params = init_parameters(tiny_spec, make_rng(0))
        x = np.random.default_rng(1).random((2, 1, 4, 4)).astype(np.float32)
        _, cache = model_forward(tiny_spec, params, x, training=True, rng=make_rng(1))
        grads = model_backward(tiny_spec, params, cache, np.zeros((2, 3), dtype=np.float32))
        for g in grads.values():
            assert np.all(g["w"] == 0) and np.all(g["b"] == 0)

    def test_replayed_masks_reproduce_the_forward(self):
        spec = build_preset("mnist", widths=[4, 4], fc_width=8)
        params = init_parameters(spec, make_rng(0))
        x = np.random.default_rng(2).random((3, 1, 28, 28)).astype(np.float32)
        a, cache = model_forward(spec, params, x, training=True, rng=make_rng(5))
        b, _ = model_forward(spec, params, x, training=True, masks=cache.masks)
        assert cache.masks
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_gradient_shapes_match_parameters(self, name):
        spec = build_preset(name)
        params = init_parameters(spec, make_rng(0))
        x = np.random.default_rng(3).random((1, *spec.input_shape)).astype(np.float32)
        logits, cache = model_forward(spec, params, x, training=True, rng=make_rng(1))
        grads = model_backward(spec, params, cache, np.ones_like(logits))
        shapes = parameter_shapes(spec)
        assert set(grads) == set(shapes)
        for i in shapes:
            assert grads[i]["w"].shape == shapes[i]["w"]
            assert grads[i]["b"].shape == shapes[i]["b"]
