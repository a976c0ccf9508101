"""Loss oracles: hand values, brute-force references, and gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldfuse import autodiff as ad
from ldfuse.errors import DomainError, ParameterError, ShapeError
from ldfuse.imageio import DepthMap
from ldfuse.losses import (l_depth_driven, l_diff, l_fusion, l_mcg, l_mci,
                           silog, sobel_magnitude, total_fusion_loss)
from ldfuse.models import TinyDepthNet

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def oracle_sobel_mag(img2d):
    """Brute-force Sobel magnitude with replicate borders."""
    h, w = img2d.shape
    padded = np.pad(img2d, 1, mode="edge")
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            win = padded[i:i + 3, j:j + 3]
            gx[i, j] = np.sum(win * SOBEL_X)
            gy[i, j] = np.sum(win * SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def oracle_mcg(fused, ir, vis):
    h, w, _ = fused.shape
    total = 0.0
    mag_ir = oracle_sobel_mag(ir[:, :, 0])
    for c in range(3):
        mag_f = oracle_sobel_mag(fused[:, :, c])
        mag_v = oracle_sobel_mag(vis[:, :, c])
        total += np.abs(mag_f - np.maximum(mag_ir, mag_v)).sum()
    return total / (h * w)


def oracle_mci(fused, ir, vis):
    h, w, _ = fused.shape
    total = 0.0
    for c in range(3):
        total += np.abs(fused[:, :, c] - np.maximum(ir[:, :, 0], vis[:, :, c])).sum()
    return total / (h * w)


def oracle_silog(y, y_hat, valid):
    d = np.log(y[valid].astype(np.float64)) - np.log(np.asarray(y_hat)[valid].astype(np.float64))
    return float(np.mean(d ** 2) - np.mean(d) ** 2)


class TestSilog:
    def test_zero_at_equal(self):
        gt = DepthMap(np.full((5, 5), 7.0, dtype=np.float32))
        assert silog(gt, np.full((5, 5), 7.0)).value == pytest.approx(0.0, abs=1e-12)

    def test_single_valid_pixel_is_zero(self):
        depth = np.full((3, 3), 2.0, dtype=np.float32)
        valid = np.zeros((3, 3), dtype=bool)
        valid[1, 1] = True
        gt = DepthMap(depth, valid)
        rng = np.random.default_rng(0)
        assert silog(gt, rng.uniform(0.5, 9.0, (3, 3))).value == pytest.approx(0.0, abs=1e-12)

    def test_two_pixel_hand_value(self):
        gt = DepthMap(np.array([[1.0, 1.0]], dtype=np.float32))
        val = silog(gt, np.array([[1.0, 0.5]])).value
        assert val == pytest.approx(0.120113, abs=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.uniform(0.5, 60.0, (6, 6)).astype(np.float32)
        y_hat = rng.uniform(0.5, 60.0, (6, 6))
        scale = float(rng.uniform(0.05, 20.0))
        gt = DepthMap(y)
        assert abs(silog(gt, scale * y_hat).value - silog(gt, y_hat).value) < 1e-9

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_non_negative_and_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.uniform(0.5, 60.0, (5, 7)).astype(np.float32)
        valid = rng.random((5, 7)) > 0.3
        if not valid.any():
            valid[0, 0] = True
        y_hat = rng.uniform(0.5, 60.0, (5, 7))
        got = silog(DepthMap(y, valid), y_hat).value
        assert got >= -1e-12
        assert got == pytest.approx(oracle_silog(y, y_hat, valid), abs=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(1.0, 9.0, (4, 4)).astype(np.float32)
        y_hat = rng.uniform(1.0, 9.0, (4, 4))
        perm = rng.permutation(16)
        base = silog(DepthMap(y), y_hat).value
        permuted = silog(DepthMap(y.ravel()[perm].reshape(4, 4)),
                         y_hat.ravel()[perm].reshape(4, 4)).value
        assert base == pytest.approx(permuted, rel=1e-12)

    def test_domain_errors(self):
        gt = DepthMap(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(DomainError):
            silog(gt, np.array([[1.0, -0.5], [1.0, 1.0]]))
        all_invalid = DepthMap(np.ones((2, 2), dtype=np.float32),
                               np.zeros((2, 2), dtype=bool))
        with pytest.raises(DomainError):
            silog(all_invalid, np.ones((2, 2)))

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            silog(DepthMap(np.ones((2, 2), dtype=np.float32)), np.ones((3, 2)))

    def test_input_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        y = rng.uniform(1.0, 9.0, (4, 4)).astype(np.float32)
        valid = rng.random((4, 4)) > 0.2
        gt = DepthMap(y, valid)
        pred = rng.uniform(1.0, 9.0, (4, 4))
        t = ad.Tensor(pred, requires_grad=True)
        silog(gt, t).tensor.backward()
        eps = 1e-6
        for ix in [(0, 0), (1, 2), (3, 3)]:
            pp, pm = pred.copy(), pred.copy()
            pp[ix] += eps
            pm[ix] -= eps
            fd = (silog(gt, pp).value - silog(gt, pm).value) / (2 * eps)
            assert t.grad[ix] == pytest.approx(fd, rel=1e-3, abs=1e-9)


class TestLDiff:
    def test_zero_at_equal(self):
        x = np.random.default_rng(0).normal(size=(4, 4, 4))
        assert l_diff(x, x).value == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(1).normal(size=(4, 4, 4))
        assert l_diff(x + 1.0, x).value == pytest.approx(1.0, rel=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_elementwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 5, 2))
        b = rng.normal(size=(3, 5, 2))
        expect = float(np.sum((a - b) ** 2) / a.size)
        assert l_diff(a, b).value == pytest.approx(expect, rel=1e-12)

    def test_strict_l2_option(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        assert l_diff(a, b, reduction="l2").value == pytest.approx(
            float(np.linalg.norm(a - b)), rel=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            l_diff(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        t = ad.Tensor(a, requires_grad=True)
        l_diff(t, b).tensor.backward()
        assert np.allclose(t.grad, 2.0 * (a - b) / a.size)


class TestSobelMagnitude:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((5, 6))
        got = sobel_magnitude(img[:, :, None]).data[:, :, 0]
        assert np.allclose(got, oracle_sobel_mag(img), atol=1e-12)


class TestMCG:
    def test_zero_when_sources_equal_fused(self):
        rng = np.random.default_rng(0)
        g = rng.random((6, 6, 1))
        fused = np.repeat(g, 3, axis=2)
        assert l_mcg(fused, g, fused).value == pytest.approx(0.0, abs=1e-12)

    def test_zero_for_constants(self):
        assert l_mcg(np.full((5, 5, 3), 0.4), np.full((5, 5, 1), 0.9),
                     np.full((5, 5, 3), 0.1)).value == 0.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_oracle_random_4x4(self, seed):
        rng = np.random.default_rng(seed)
        fused = rng.random((4, 4, 3))
        ir = rng.random((4, 4, 1))
        vis = rng.random((4, 4, 3))
        assert l_mcg(fused, ir, vis).value == pytest.approx(
            oracle_mcg(fused, ir, vis), rel=1e-10)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            l_mcg(np.zeros((4, 4, 3)), np.zeros((5, 4, 1)), np.zeros((4, 4, 3)))

    def test_flip_invariance(self):
        rng = np.random.default_rng(8)
        fused, ir, vis = rng.random((6, 7, 3)), rng.random((6, 7, 1)), rng.random((6, 7, 3))
        base = l_mcg(fused, ir, vis).value
        assert base == pytest.approx(
            l_mcg(fused[:, ::-1], ir[:, ::-1], vis[:, ::-1]).value, rel=1e-12)
        assert base == pytest.approx(
            l_mcg(fused[::-1], ir[::-1], vis[::-1]).value, rel=1e-12)

    def test_input_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        fused = rng.random((4, 4, 3))
        ir = rng.random((4, 4, 1))
        vis = rng.random((4, 4, 3))
        t = ad.Tensor(fused, requires_grad=True)
        l_mcg(t, ir, vis).tensor.backward()
        eps = 1e-7
        for ix in [(0, 0, 0), (2, 1, 1), (3, 3, 2)]:
            fp, fm = fused.copy(), fused.copy()
            fp[ix] += eps
            fm[ix] -= eps
            fd = (l_mcg(fp, ir, vis).value - l_mcg(fm, ir, vis).value) / (2 * eps)
            assert t.grad[ix] == pytest.approx(fd, rel=1e-3, abs=1e-8)


class TestMCI:
    def test_zero_at_max(self):
        rng = np.random.default_rng(0)
        ir = rng.random((4, 4, 1))
        vis = rng.random((4, 4, 3))
        fused = np.maximum(ir, vis)
        assert l_mci(fused, ir, vis).value == 0.0

    def test_hand_value_three(self):
        val = l_mci(np.zeros((4, 4, 3)), np.ones((4, 4, 1)), np.zeros((4, 4, 3))).value
        assert val == pytest.approx(3.0, rel=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        fused, ir, vis = rng.random((4, 4, 3)), rng.random((4, 4, 1)), rng.random((4, 4, 3))
        assert l_mci(fused, ir, vis).value == pytest.approx(
            oracle_mci(fused, ir, vis), rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        fused, ir, vis = rng.random((4, 4, 3)), rng.random((4, 4, 1)), rng.random((4, 4, 3))
        perm = rng.permutation(16)

        def shuffle(a):
            flat = a.reshape(16, -1)[perm]
            return flat.reshape(a.shape)

        assert l_mci(fused, ir, vis).value == pytest.approx(
            l_mci(shuffle(fused), shuffle(ir), shuffle(vis)).value, rel=1e-12)

    def test_input_gradient_matches_fd(self):
        rng = np.random.default_rng(14)
        fused = rng.random((4, 4, 3))
        ir = rng.random((4, 4, 1))
        vis = rng.random((4, 4, 3))
        t = ad.Tensor(fused, requires_grad=True)
        l_mci(t, ir, vis).tensor.backward()
        eps = 1e-7
        for ix in [(0, 0, 0), (1, 3, 1), (3, 2, 2)]:
            fp, fm = fused.copy(), fused.copy()
            fp[ix] += eps
            fm[ix] -= eps
            fd = (l_mci(fp, ir, vis).value - l_mci(fm, ir, vis).value) / (2 * eps)
            assert t.grad[ix] == pytest.approx(fd, rel=1e-3, abs=1e-8)


class TestComposites:
    def test_l_fusion_is_sum(self):
        rng = np.random.default_rng(0)
        fused, ir, vis = rng.random((5, 5, 3)), rng.random((5, 5, 1)), rng.random((5, 5, 3))
        total = l_fusion(fused, ir, vis)
        assert total.value == pytest.approx(
            l_mcg(fused, ir, vis).value + l_mci(fused, ir, vis).value, rel=1e-12)
        assert set(total.components) == {"l_mcg", "l_mci"}
        assert total.value == pytest.approx(sum(total.components.values()), rel=1e-12)

    def test_depth_driven_zero_when_branches_match_gt(self):
        # estimators that echo a constant equal to the gt depth give SiLog 0
        class Echo:
            def __init__(self, value):
                self.value = value

            def forward(self, x):
                n, h, w, _ = x.data.shape
                return ad.Tensor(np.full((n, h, w, 1), self.value)) + 0.0 * ad.tsum(x)

        gt = DepthMap(np.full((4, 4), 12.5, dtype=np.float32))
        fused = np.random.default_rng(0).random((4, 4, 3))
        val = l_depth_driven(fused, gt, Echo(12.5), Echo(12.5)).value
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_depth_driven_matches_compositional_oracle(self):
        rng = np.random.default_rng(7)
        fused = rng.random((8, 8, 3))
        gt = DepthMap(rng.uniform(1.0, 40.0, (8, 8)).astype(np.float32))
        net_vis = TinyDepthNet(3, 8, seed=1)
        net_ir = TinyDepthNet(1, 8, seed=2)
        got = l_depth_driven(fused, gt, net_vis, net_ir)
        lum = fused @ np.array([0.299, 0.587, 0.114])
        s_vis = silog(gt, net_vis.predict(fused)).value
        s_ir = silog(gt, net_ir.predict(lum[:, :, None])).value
        # predict() rounds through the float32 DepthMap contract
        assert got.value == pytest.approx(s_vis + s_ir, rel=1e-5)

    def test_total_weighting(self):
        rng = np.random.default_rng(3)
        fused = rng.random((8, 8, 3))
        ir, vis = rng.random((8, 8, 1)), rng.random((8, 8, 3))
        gt = DepthMap(rng.uniform(1.0, 40.0, (8, 8)).astype(np.float32))
        nets = (TinyDepthNet(3, 8, seed=1), TinyDepthNet(1, 8, seed=2))
        fus = l_fusion(fused, ir, vis).value
        dd = l_depth_driven(fused, gt, *nets).value
        for lam in (0.0, 1.0, 2.0):
            got = total_fusion_loss(fused, ir, vis, gt, nets, lam)
            assert got.value == pytest.approx(fus + lam * dd, rel=1e-9)
        zero = total_fusion_loss(fused, ir, vis, gt, nets, 0.0)
        assert zero.value == pytest.approx(l_fusion(fused, ir, vis).value, rel=1e-12)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ParameterError):
            total_fusion_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)),
                              np.zeros((4, 4, 3)), DepthMap(np.ones((4, 4), dtype=np.float32)),
                              None, -0.1)
