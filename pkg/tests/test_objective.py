import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defocusnet.deconv import PAD_SENTINEL, build_stack, labels_to_indices
from defocusnet.errors import ConfigError, DataError
from defocusnet.objective import (DepthPermutation, cross_entropy, gumbel_soft_index,
                                  permute_depth, random_shuffle, smoothness_loss, total_loss)
from defocusnet.optics import build_kernel_bank, sample_mask


def fd_check(f, x, grad, h=1e-6, count=15, seed=0):
    rng = np.random.default_rng(seed)
    for flat in rng.choice(x.size, size=min(count, x.size), replace=False):
        idx = np.unravel_index(flat, x.shape)
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        assert abs((fp - fm) / (2 * h) - grad[idx]) <= 1e-6 + 1e-5 * abs(grad[idx])


class TestPermutation:
    def test_moves_slices(self):
        perm = DepthPermutation(np.array([2, 0, 1]))
        vol = np.array([10, 11, 12])
        np.testing.assert_array_equal(permute_depth(vol, perm, axis=0), [11, 12, 10])

    def test_inverse(self):
        perm = DepthPermutation.random(4)
        vol = np.arange(24)
        back = permute_depth(permute_depth(vol, perm, 0), perm.inverse, 0)
        np.testing.assert_array_equal(back, vol)

    def test_rejects_non_bijection(self):
        with pytest.raises(ConfigError):
            DepthPermutation(np.array([0, 0, 1]))

    def test_seeded(self):
        a, b = DepthPermutation.random(9), DepthPermutation.random(9)
        np.testing.assert_array_equal(a.perm, b.perm)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_shuffle_keeps_ground_truth_slice(self, seed):
        bank = build_kernel_bank(sample_mask("asym_a"), 3)
        img = np.random.default_rng(seed).uniform(size=(8, 8))
        stack = build_stack(img, bank, "wiener")
        labels = np.random.default_rng(seed).choice([-3, -2, 0, 2, 3], size=(8, 8))
        gt = labels_to_indices(labels, stack.slice_labels)
        shuffled, gt2 = random_shuffle(stack, gt, DepthPermutation.random(seed))
        ys, xs = np.indices((8, 8))
        np.testing.assert_array_equal(shuffled.data[ys, xs, gt2], stack.data[ys, xs, gt])
        np.testing.assert_array_equal(shuffled.signed_labels[gt2], labels)
        assert np.count_nonzero(shuffled.slice_labels == PAD_SENTINEL) == 24 - 1 - stack.n


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 5, 24)), np.zeros((4, 5), int))
        assert loss == pytest.approx(math.log(24))

    def test_hand_value(self):
        logits = np.array([[[2.0, 0.0, -1.0]]])
        expected = -(2.0 - math.log(math.exp(2) + 1 + math.exp(-1)))
        assert cross_entropy(logits, np.array([[0]]))[0] == pytest.approx(expected)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4, 6))
        gt = rng.integers(0, 6, size=(3, 4))
        _, grad = cross_entropy(x, gt)
        fd_check(lambda z: cross_entropy(z, gt)[0], x, grad)

    def test_bad_indices(self):
        with pytest.raises(DataError):
            cross_entropy(np.zeros((2, 2, 3)), np.full((2, 2), 3))
        with pytest.raises(DataError):
            cross_entropy(np.zeros((2, 2, 3)), np.zeros((2, 3), int))


class TestGumbel:
    def test_uniform_noise_free(self):
        index, _ = gumbel_soft_index(np.zeros((3, 3, 24)), noise=False)
        np.testing.assert_allclose(index, 11.5)

    def test_peaked_logits(self):
        logits = np.full((1, 1, 24), -50.0)
        logits[0, 0, 7] = 50.0
        assert gumbel_soft_index(logits, noise=False)[0][0, 0] == pytest.approx(7.0)

    def test_noise_reproducible(self):
        x = np.random.default_rng(2).normal(size=(4, 4, 24))
        a, _ = gumbel_soft_index(x, noise_seed=5)
        b, _ = gumbel_soft_index(x, noise_seed=5)
        c, _ = gumbel_soft_index(x, noise_seed=6)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    @pytest.mark.parametrize("noise", [False, True])
    def test_gradient(self, noise):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 3, 8))
        up = rng.normal(size=(3, 3))
        _, backprop = gumbel_soft_index(x, 0.5, noise_seed=4, noise=noise)
        f = lambda z: float(np.sum(gumbel_soft_index(z, 0.5, noise_seed=4, noise=noise)[0] * up))
        fd_check(f, x, backprop(up))

    def test_temperature(self):
        with pytest.raises(ConfigError):
            gumbel_soft_index(np.zeros((1, 1, 2)), temperature=0)


class TestSmoothness:
    def test_hand_value(self):
        assert smoothness_loss(np.array([[0.0, 1.0], [0.0, 1.0]]))[0] == pytest.approx(0.5)

    def test_constant(self):
        value, grad = smoothness_loss(np.full((5, 6), 3.0))
        assert value == 0.0 and np.all(grad == 0)

    def test_gradient(self):
        x = np.random.default_rng(4).normal(size=(5, 6))
        _, grad = smoothness_loss(x)
        fd_check(lambda z: smoothness_loss(z)[0], x, grad)

    def test_too_small(self):
        with pytest.raises(DataError):
            smoothness_loss(np.zeros((1, 5)))


class TestTotal:
    def test_combination(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 4, 24))
        gt = rng.integers(0, 24, size=(4, 4))
        report, _ = total_loss(x, gt, 0.5, 0.1, noise_seed=1)
        ce, _ = cross_entropy(x, gt)
        index, _ = gumbel_soft_index(x, 0.5, noise_seed=1)
        assert report.ce == pytest.approx(ce)
        assert report.smooth == pytest.approx(smoothness_loss(index)[0])
        assert report.total == pytest.approx(ce + 0.1 * report.smooth)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 5, 24))
        gt = rng.integers(0, 24, size=(4, 5))
        _, grad = total_loss(x, gt, 0.5, 0.1, noise_seed=2)
        fd_check(lambda z: total_loss(z, gt, 0.5, 0.1, noise_seed=2)[0].total, x, grad)

    def test_zero_weight_is_cross_entropy(self):
        x = np.random.default_rng(7).normal(size=(3, 3, 24))
        gt = np.zeros((3, 3), int)
        _, g1 = total_loss(x, gt, smooth_weight=0.0, noise_seed=0)
        _, g2 = cross_entropy(x, gt)
        np.testing.assert_array_equal(g1, g2)


class TestIdentities:
    def test_identity_permutation(self):
        vol = np.random.default_rng(8).normal(size=(2, 2, 24))
        np.testing.assert_array_equal(permute_depth(vol, DepthPermutation.identity()), vol)

    def test_roundtrip_restores_stack(self):
        bank = build_kernel_bank(sample_mask("asym_a"), 4)
        stack = build_stack(np.random.default_rng(9).uniform(size=(8, 8)), bank, "wiener")
        gt = np.random.default_rng(9).integers(0, 7, size=(8, 8))
        perm = DepthPermutation.random(3)
        s1, g1 = random_shuffle(stack, gt, perm)
        s2, g2 = random_shuffle(s1, g1, perm.inverse)
        np.testing.assert_array_equal(s2.data, stack.data)
        np.testing.assert_array_equal(s2.slice_labels, stack.slice_labels)
        np.testing.assert_array_equal(g2, gt)

    def test_swap_zero_and_five(self):
        perm = np.arange(24)
        perm[[0, 5]] = [5, 0]
        gt = np.array([[0, 1], [0, 5]])
        bank = build_kernel_bank(sample_mask("asym_a"), 4)
        stack = build_stack(np.zeros((2, 2)), bank, "wiener")
        _, moved = random_shuffle(stack, gt, DepthPermutation(perm))
        np.testing.assert_array_equal(moved, [[5, 1], [5, 0]])

    def test_saturated_prediction(self):
        gt = np.random.default_rng(10).integers(0, 24, size=(3, 3))
        logits = np.zeros((3, 3, 24))
        np.put_along_axis(logits, gt[..., None], 50.0, axis=-1)
        assert cross_entropy(logits, gt)[0] <= 1e-8

    def test_low_temperature_limit(self):
        logits = np.random.default_rng(11).normal(size=(2, 2, 24))
        index, _ = gumbel_soft_index(logits, temperature=1e-4, noise=False)
        np.testing.assert_allclose(index, logits.argmax(-1), atol=1e-6)

    def test_composite_gradcheck_noise_free(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 8, 24))
        gt = rng.integers(0, 24, size=(8, 8))
        _, grad = total_loss(x, gt, 0.5, 0.1, noise=False)
        f = lambda z: total_loss(z, gt, 0.5, 0.1, noise=False)[0].total
        for flat in rng.choice(x.size, 25, replace=False):
            idx = np.unravel_index(flat, x.shape)
            old = x[idx]
            x[idx] = old + 1e-6
            fp = f(x)
            x[idx] = old - 1e-6
            fm = f(x)
            x[idx] = old
            num = (fp - fm) / 2e-6
            assert abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-5) <= 1e-4
