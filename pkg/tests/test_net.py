"""Unit oracles for the network core: heads, CAM, losses, optimizer, gradients."""

import math

import numpy as np
import pytest

from agcl.net import (
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    binary_loss_and_grads,
    classification_loss,
    classify_binary,
    classify_multilabel,
    compute_cam,
    compute_cams,
    forward_features,
    init_binary_head,
    init_multilabel_head,
    init_trunk,
    load_checkpoint,
    multilabel_loss_and_grads,
    regression_loss,
    restore_rng,
    save_checkpoint,
    sgd_step,
    sigmoid_cross_entropy,
    smooth_l1,
    softmax_cross_entropy,
    total_loss,
)

RNG = np.random.default_rng(7)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0) == 0.0

    def test_branches_agree_at_knot(self):
        assert smooth_l1(1.0) == pytest.approx(0.5, rel=1e-12)
        assert smooth_l1(-1.0) == pytest.approx(0.5, rel=1e-12)

    def test_hand_values(self):
        assert smooth_l1(2.0) == pytest.approx(1.5, rel=1e-12)
        assert smooth_l1(0.5) == pytest.approx(0.125, rel=1e-12)

    def test_even_nonneg_bounded_by_abs(self):
        z = RNG.uniform(-5, 5, size=1000)
        v = smooth_l1(z)
        np.testing.assert_allclose(v, smooth_l1(-z), rtol=1e-12)
        assert np.all(v >= 0)
        assert np.all(v <= np.abs(z) + 1e-12)

    def test_once_differentiable(self):
        # central differences across the knot stay continuous
        for z0 in (-1.0, 1.0, 0.3, -2.2):
            h = 1e-6
            d = (smooth_l1(z0 + h) - smooth_l1(z0 - h)) / (2 * h)
            expected = z0 if abs(z0) < 1 else math.copysign(1.0, z0)
            assert d == pytest.approx(expected, abs=1e-5)


class TestRegressionLoss:
    def test_identical_maps(self):
        a = RNG.standard_normal((8, 8))
        assert regression_loss(a, a) == 0.0

    def test_uniform_difference(self):
        pred = np.full((2, 2), 0.5)
        target = np.zeros((2, 2))
        assert regression_loss(pred, target) == pytest.approx(4 * 0.125, rel=1e-12)

    def test_large_difference(self):
        assert regression_loss(np.array([[3.0]]), np.array([[0.0]])) == pytest.approx(2.5, rel=1e-12)

    def test_symmetry(self):
        a, b = RNG.standard_normal((4, 4)), RNG.standard_normal((4, 4))
        assert regression_loss(a, b) == pytest.approx(regression_loss(b, a), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            regression_loss(np.zeros((2, 2)), np.zeros((3, 3)))


class TestCam:
    def test_zero_weights(self):
        fm = RNG.standard_normal((4, 4, 8))
        np.testing.assert_array_equal(compute_cam(fm, np.zeros(8)), np.zeros((4, 4)))

    def test_dot_product_oracle(self):
        fm = np.array([2.0, 3.0]).reshape(1, 1, 2)
        w = np.array([0.5, -1.0])
        assert compute_cam(fm, w)[0, 0] == pytest.approx(-2.0, rel=1e-12)

    def test_linearity(self):
        fm = RNG.standard_normal((4, 4, 8))
        w = RNG.standard_normal(8)
        np.testing.assert_allclose(compute_cam(fm, 2 * w), 2 * compute_cam(fm, w), rtol=1e-9)
        w2 = RNG.standard_normal(8)
        np.testing.assert_allclose(
            compute_cam(fm, w + w2), compute_cam(fm, w) + compute_cam(fm, w2), rtol=1e-9, atol=1e-12
        )

    def test_one_hot_extracts_channel(self):
        fm = RNG.standard_normal((4, 4, 8))
        one_hot = np.zeros(8)
        one_hot[3] = 1.0
        np.testing.assert_array_equal(compute_cam(fm, one_hot), fm[:, :, 3])

    def test_batched_matches_loop(self):
        fm = RNG.standard_normal((3, 4, 4, 8))
        w = RNG.standard_normal((5, 8))
        cams = compute_cams(fm, w)
        for i in range(3):
            for c in range(5):
                np.testing.assert_allclose(cams[i, c], compute_cam(fm[i], w[c]), rtol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_cam(RNG.standard_normal((4, 4, 8)), np.zeros(5))


class TestHeads:
    def test_multilabel_zero_logits(self):
        fm = np.zeros((4, 4, 8))
        head = {"w": np.zeros((6, 8)), "b": np.zeros(6)}
        np.testing.assert_allclose(classify_multilabel(fm, head), 0.5, rtol=1e-12)

    def test_multilabel_saturation(self):
        fm = np.ones((4, 4, 1))
        head = {"w": np.array([[50.0]]), "b": np.array([0.0])}
        assert classify_multilabel(fm, head)[0] == pytest.approx(1.0, abs=1e-6)

    def test_multilabel_hand_value(self):
        # D=1, pooled mean 2.0, w=1.5, b=-1 -> logistic(2.0)
        fm = np.full((2, 2, 1), 2.0)
        head = {"w": np.array([[1.5]]), "b": np.array([-1.0])}
        assert classify_multilabel(fm, head)[0] == pytest.approx(0.8807970779778823, rel=1e-9)

    def test_binary_equal_logits(self):
        fm = np.zeros((4, 4, 8))
        head = {"w": np.zeros((2, 8)), "b": np.zeros(2)}
        np.testing.assert_allclose(classify_binary(fm, head), [0.5, 0.5], rtol=1e-12)

    def test_binary_hand_value(self):
        fm = np.ones((1, 1, 1))
        head = {"w": np.zeros((2, 1)), "b": np.array([0.0, math.log(3.0)])}
        np.testing.assert_allclose(classify_binary(fm, head), [0.25, 0.75], rtol=1e-9)

    def test_binary_sums_to_one(self):
        for _ in range(20):
            fm = RNG.standard_normal((4, 4, 8))
            head = {"w": RNG.standard_normal((2, 8)), "b": RNG.standard_normal(2)}
            assert classify_binary(fm, head).sum() == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        fm = RNG.standard_normal((4, 4, 8))
        with pytest.raises(ValueError):
            classify_multilabel(fm, {"w": np.zeros((6, 5)), "b": np.zeros(6)})
        with pytest.raises(ValueError):
            classify_binary(fm, {"w": np.zeros((3, 8)), "b": np.zeros(3)})


class TestClassificationLoss:
    def test_half_probs(self):
        p = np.full(6, 0.5)
        for y in (np.zeros(6), np.ones(6), np.array([1, 0, 1, 0, 1, 0.0])):
            assert sigmoid_cross_entropy(p, y) == pytest.approx(math.log(2), rel=1e-9)

    def test_perfect_prediction_bounded_by_eps(self):
        p = np.full(4, 1.0 - 1e-7)
        assert sigmoid_cross_entropy(p, np.ones(4)) <= 1.2e-7

    def test_hand_value(self):
        assert sigmoid_cross_entropy(np.array([0.8]), np.array([1.0])) == pytest.approx(
            0.2231435513142097, rel=1e-9
        )

    def test_softmax_branch(self):
        assert softmax_cross_entropy(np.array([0.25, 0.75]), 1) == pytest.approx(
            -math.log(0.75), rel=1e-9
        )
        assert classification_loss(np.array([0.25, 0.75]), 1) == pytest.approx(
            -math.log(0.75), rel=1e-9
        )


class TestTotalLoss:
    def test_non_seed_reduces_to_classification(self):
        probs = np.array([0.6, 0.3])
        labels = np.array([1.0, 0.0])
        cams = RNG.standard_normal((2, 4, 4))
        assert total_loss(probs, labels, cams, {}, 0.005) == pytest.approx(
            sigmoid_cross_entropy(probs, labels), rel=1e-12
        )

    def test_zero_weight(self):
        probs = np.array([0.6, 0.3])
        labels = np.array([1.0, 0.0])
        cams = RNG.standard_normal((2, 4, 4))
        targets = {0: RNG.standard_normal((4, 4))}
        assert total_loss(probs, labels, cams, targets, 0.0) == pytest.approx(
            sigmoid_cross_entropy(probs, labels), rel=1e-12
        )

    def test_arithmetic(self):
        # classification 0.7 + 0.005 * 10 = 0.75
        p = np.array([math.exp(-0.7)])  # single class: -ln p = 0.7
        y = np.array([1.0])
        cams = np.zeros((1, 1, 1))
        target = np.full((1, 1), -10.5)  # |0 - (-10.5)| - 0.5 = 10
        got = total_loss(p, y, cams, {0: target}, 0.005)
        assert got == pytest.approx(0.75, rel=1e-9)

    def test_missing_map_is_hard_error(self):
        with pytest.raises(ValueError):
            total_loss(np.array([0.5]), np.array([1.0]), np.zeros((1, 2, 2)), {0: None}, 0.005)


class TestForwardFeatures:
    CFG = ModelConfig(input_size=64, channels=(4, 8, 8), num_classes=3)

    def test_zero_image_zero_bias(self):
        params = init_trunk(self.CFG, np.random.default_rng(0))
        fm = forward_features(params, np.zeros((64, 64)), self.CFG)
        np.testing.assert_array_equal(fm, np.zeros_like(fm))

    def test_deterministic(self):
        params = init_trunk(self.CFG, np.random.default_rng(0))
        img = np.random.default_rng(1).random((64, 64))
        np.testing.assert_array_equal(
            forward_features(params, img, self.CFG), forward_features(params, img, self.CFG)
        )

    def test_shape_contract(self):
        params = init_trunk(self.CFG, np.random.default_rng(0))
        fm = forward_features(params, np.zeros((64, 64)), self.CFG)
        assert fm.shape == (8, 8, 8)
        batch = forward_features(params, np.zeros((5, 64, 64)), self.CFG)
        assert batch.shape == (5, 8, 8, 8)

    def test_shape_mismatch_rejected(self):
        params = init_trunk(self.CFG, np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward_features(params, np.zeros((32, 32)), self.CFG)


class TestSgd:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == pytest.approx(0.001)
        assert cfg.lr_at(10) == pytest.approx(0.0001)
        assert cfg.lr_at(25) == pytest.approx(0.00001)

    def test_zero_gradient_no_motion(self):
        params = {"p": np.array([1.0, -2.0])}
        sgd_step(params, {"p": np.zeros(2)}, {}, TrainConfig(), epoch=0)
        np.testing.assert_array_equal(params["p"], [1.0, -2.0])

    def test_single_step_hand_update(self):
        params = {"p": np.array([0.0])}
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0)
        sgd_step(params, {"p": np.array([1.0])}, {}, cfg, epoch=0)
        assert params["p"][0] == pytest.approx(-0.1, rel=1e-12)

    def test_nonfinite_gradient_aborts(self):
        params = {"p": np.array([0.0])}
        with pytest.raises(TrainingDiverged):
            sgd_step(params, {"p": np.array([np.nan])}, {}, TrainConfig(), epoch=0)


def _tiny_setup(seed=0, num_classes=3):
    cfg = ModelConfig(input_size=16, channels=(4, 8, 8), num_classes=num_classes, dtype="float64")
    rng = np.random.default_rng(seed)
    params = init_trunk(cfg, rng)
    head = init_multilabel_head(cfg, rng)
    # keep the model comfortably under 2k parameters
    assert cfg.num_params() + head["w"].size + head["b"].size < 2000
    return cfg, params, head, rng


def _flatten(params, head):
    items = [(("trunk", k), v) for k, v in sorted(params.items())]
    items += [(("head", k), v) for k, v in sorted(head.items())]
    return items


@pytest.mark.parametrize("reg_weight,with_seeds", [(0.0, False), (0.005, False), (0.0, True), (0.005, True)])
def test_gradients_match_finite_differences(reg_weight, with_seeds):
    """Analytic gradients of the joint objective vs central differences."""
    cfg, params, head, rng = _tiny_setup()
    n, c = 3, cfg.num_classes
    x = rng.random((n, 1, 16, 16))
    y = (rng.random((n, c)) < 0.4).astype(float)
    if with_seeds:
        seed_mask = rng.random((n, c)) < 0.5
        seed_mask[0, 0] = True  # at least one active gate
        seed_targets = rng.standard_normal((n, c, 2, 2)) * 0.5
    else:
        seed_mask = np.zeros((n, c), dtype=bool)
        seed_targets = np.zeros((n, c, 2, 2))

    def loss_fn():
        loss, _, _ = multilabel_loss_and_grads(
            params, head, x, y, reg_weight=reg_weight, seed_mask=seed_mask, seed_targets=seed_targets
        )
        return loss

    _, _, grads = multilabel_loss_and_grads(
        params, head, x, y, reg_weight=reg_weight, seed_mask=seed_mask, seed_targets=seed_targets
    )
    eps = 1e-5
    for (group, key), tensor in _flatten(params, head):
        g = grads[f"head_{key}" if group == "head" else key]
        flat = tensor.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn()
            flat[idx] = orig - eps
            down = loss_fn()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = g.ravel()[idx]
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-6), (group, key, idx)


def test_binary_gradients_match_finite_differences():
    cfg = ModelConfig(input_size=16, channels=(4, 8, 8), num_classes=2, dtype="float64")
    rng = np.random.default_rng(3)
    params = init_trunk(cfg, rng)
    head = init_binary_head(cfg, rng)
    x = rng.random((4, 1, 16, 16))
    y = np.array([0, 1, 1, 0])

    _, grads = binary_loss_and_grads(params, head, x, y)
    eps = 1e-5
    for (group, key), tensor in _flatten(params, head):
        g = grads[f"head_{key}" if group == "head" else key]
        flat = tensor.ravel()
        for idx in range(0, flat.size, 7):  # sparse probe keeps the test quick
            orig = flat[idx]
            flat[idx] = orig + eps
            up, _ = binary_loss_and_grads(params, head, x, y)
            flat[idx] = orig - eps
            down, _ = binary_loss_and_grads(params, head, x, y)
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            assert g.ravel()[idx] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_empty_seed_store_reduces_to_classification():
    cfg, params, head, rng = _tiny_setup(seed=5)
    x = rng.random((4, 1, 16, 16))
    y = (rng.random((4, cfg.num_classes)) < 0.5).astype(float)
    full, (cls_part, reg_part), _ = multilabel_loss_and_grads(
        params, head, x, y, reg_weight=0.005,
        seed_mask=np.zeros((4, cfg.num_classes), dtype=bool),
        seed_targets=np.zeros((4, cfg.num_classes, 2, 2)),
    )
    assert reg_part == 0.0
    assert full == pytest.approx(cls_part, rel=1e-12)
    probs = classify_multilabel(forward_features(params, x, cfg), head)
    manual = np.mean([sigmoid_cross_entropy(probs[i], y[i]) for i in range(4)])
    assert full == pytest.approx(manual, rel=1e-9)


def test_checkpoint_roundtrip_resumes_bit_exact(tmp_path):
    cfg, params, head, rng = _tiny_setup(seed=11)
    train_rng = np.random.default_rng(42)
    x = rng.random((8, 1, 16, 16))
    y = (rng.random((8, cfg.num_classes)) < 0.5).astype(float)

    def step(p, h, gen):
        vel = {}
        order = gen.permutation(8)
        loss, _, grads = multilabel_loss_and_grads(p, h, x[order], y[order])
        sgd_step(p, grads, vel, TrainConfig(), epoch=0, head=h)
        return loss

    # two steps straight through
    p1 = {k: v.copy() for k, v in params.items()}
    h1 = {k: v.copy() for k, v in head.items()}
    g1 = np.random.default_rng(42)
    step(p1, h1, g1)
    step(p1, h1, g1)

    # one step, checkpoint, reload, one more step
    p2 = {k: v.copy() for k, v in params.items()}
    h2 = {k: v.copy() for k, v in head.items()}
    g2 = np.random.default_rng(42)
    step(p2, h2, g2)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, p2, h2, cfg, epoch=1, rng=g2)
    p3, h3, cfg3, meta = load_checkpoint(path)
    assert cfg3 == cfg and meta["epoch"] == 1
    step(p3, h3, restore_rng(meta))

    for k in p1:
        np.testing.assert_array_equal(p1[k], p3[k])
    for k in h1:
        np.testing.assert_array_equal(h1[k], h3[k])
