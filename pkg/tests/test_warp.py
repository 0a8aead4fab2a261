import numpy as np
import pytest

from duflow.errors import ShapeError
from duflow.tensor import Graph, Tensor4
from duflow.warp import sample_flow_at_flow, warp_image

import oracles


def const_flow(n, h, w, u, v, dtype=np.float64):
    f = np.zeros((n, 2, h, w), dtype=dtype)
    f[:, 0] = u
    f[:, 1] = v
    return f


class TestWarpImage:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(2, 3, 6, 7))
        g = Graph()
        warped, valid = warp_image(g, Tensor4(img), Tensor4(const_flow(2, 6, 7, 0, 0)))
        np.testing.assert_array_equal(warped.data, img)
        assert (valid.data == 1.0).all()

    def test_horizontal_ramp_shift(self):
        h, w = 5, 12
        img = np.tile(np.arange(w, dtype=np.float64), (h, 1))[None, None]
        g = Graph()
        warped, _ = warp_image(g, Tensor4(img), Tensor4(const_flow(1, h, w, 2.5, 0.0)))
        interior = warped.data[0, 0, :, : w - 3]
        expect = img[0, 0, :, : w - 3] + 2.5
        np.testing.assert_allclose(interior, expect, atol=1e-12)

    def test_fully_out_of_bounds(self):
        h, w = 4, 6
        img = np.ones((1, 1, h, w))
        g = Graph()
        _, valid = warp_image(g, Tensor4(img), Tensor4(const_flow(1, h, w, float(w), 0.0)))
        assert (valid.data == 0.0).all()

    def test_integer_displacement_exact(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(1, 2, 8, 8))
        g = Graph()
        warped, valid = warp_image(g, Tensor4(img), Tensor4(const_flow(1, 8, 8, 3.0, -2.0)))
        # in-bounds region must reproduce the pure pixel shift bit-exactly
        vy, vx = np.where(valid.data[0, 0] == 1.0)
        for y, x in zip(vy, vx):
            np.testing.assert_array_equal(warped.data[0, :, y, x], img[0, :, y - 2, x + 3])

    def test_oracle_100_random_cases(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            h = int(rng.integers(3, 9))
            w = int(rng.integers(3, 9))
            img = rng.uniform(size=(1, 2, h, w))
            flow = rng.uniform(-3.0, 3.0, size=(1, 2, h, w))
            g = Graph()
            warped, valid = warp_image(g, Tensor4(img), Tensor4(flow))
            ref, vref = oracles.naive_warp(img, flow)
            worst = max(worst, float(np.max(np.abs(warped.data - ref))))
            np.testing.assert_array_equal(valid.data, vref)
        assert worst <= 1e-6

    def test_gradient_wrt_flow_finite_difference(self):
        rng = np.random.default_rng(5)
        h, w = 6, 6
        img = rng.uniform(size=(1, 1, h, w))
        flow = rng.uniform(-1.2, 1.2, size=(1, 2, h, w))
        # keep sources strictly interior and away from integer lattice points
        flow = np.round(flow * 4) / 4 + 0.13
        ft = Tensor4(flow.copy(), requires_grad=True)
        g = Graph()
        warped, _ = warp_image(g, Tensor4(img), ft)
        crop = g.crop(warped, 2, 2, 2, 2)  # away from clamped borders
        g.backward(g.reduce_mean(crop))

        work = flow.copy()

        def run():
            gg = Graph()
            wr, _ = warp_image(gg, Tensor4(img), Tensor4(work))
            return gg.reduce_mean(gg.crop(wr, 2, 2, 2, 2)).data.item()

        num = oracles.finite_diff(run, work, h=1e-5)
        assert oracles.max_rel_err(ft.grad, num) < 1e-4

    def test_gradient_wrt_target(self):
        rng = np.random.default_rng(6)
        h, w = 5, 5
        img = rng.uniform(size=(1, 1, h, w))
        flow = rng.uniform(-0.8, 0.8, size=(1, 2, h, w)) + 0.07
        it = Tensor4(img.copy(), requires_grad=True)
        g = Graph()
        warped, _ = warp_image(g, it, Tensor4(flow))
        g.backward(g.reduce_mean(warped))

        work = img.copy()

        def run():
            gg = Graph()
            wr, _ = warp_image(gg, Tensor4(work), Tensor4(flow))
            return gg.reduce_mean(wr).data.item()

        num = oracles.finite_diff(run, work, h=1e-5)
        assert oracles.max_rel_err(it.grad, num) < 1e-5

    def test_dim_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            warp_image(g, Tensor4(np.ones((1, 1, 4, 4))), Tensor4(np.ones((1, 2, 5, 4))))
        with pytest.raises(ShapeError):
            warp_image(g, Tensor4(np.ones((1, 1, 4, 4))), Tensor4(np.ones((1, 3, 4, 4))))


class TestSampleFlowAtFlow:
    def test_zero_forward_identity(self):
        rng = np.random.default_rng(7)
        back = rng.uniform(-2, 2, size=(1, 2, 6, 6))
        g = Graph()
        out, _ = sample_flow_at_flow(g, Tensor4(back), Tensor4(const_flow(1, 6, 6, 0, 0)))
        np.testing.assert_array_equal(out.data, back)

    def test_uniform_inverse_pair(self):
        h, w = 8, 10
        fwd = const_flow(1, h, w, 3.0, 0.0)
        bwd = const_flow(1, h, w, -3.0, 0.0)
        g = Graph()
        out, valid = sample_flow_at_flow(g, Tensor4(bwd), Tensor4(fwd))
        interior = out.data[0, :, :, : w - 3]
        np.testing.assert_allclose(interior[0], -3.0, atol=1e-12)
        np.testing.assert_allclose(interior[1], 0.0, atol=1e-12)

    def test_random_smooth_fields_match_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            h = int(rng.integers(4, 10))
            w = int(rng.integers(4, 10))
            bwd = rng.uniform(-2, 2, size=(1, 2, h, w))
            fwd = rng.uniform(-2, 2, size=(1, 2, h, w))
            g = Graph()
            out, _ = sample_flow_at_flow(g, Tensor4(bwd), Tensor4(fwd))
            ref, _ = oracles.naive_warp(bwd, fwd)
            assert float(np.max(np.abs(out.data - ref))) <= 1e-6
