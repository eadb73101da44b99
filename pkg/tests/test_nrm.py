import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutsgg.autograd import const
from layoutsgg.gradcheck import check_op
from layoutsgg.nrm import (
    EPS,
    Layout,
    grid_points,
    instance_norm_op,
    instance_normalize,
    layout_attention,
    nrm_forward,
    nrm_op,
    restitute,
)


def random_boxes(rng, n):
    lo = rng.uniform(0, 0.7, size=(n, 2))
    side = rng.uniform(0.05, 0.3, size=(n, 2))
    return np.hstack([lo, np.minimum(lo + side, 1.0)])


class TestInstanceNorm:
    def test_example(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        n, r = instance_normalize(f)
        expected = (f - 2.5) / math.sqrt(1.25 + EPS)
        np.testing.assert_allclose(n, expected, atol=1e-15)
        np.testing.assert_allclose(r, f - expected, atol=1e-15)

    def test_constant_channel_is_zero(self):
        n, r = instance_normalize(np.full((2, 3, 3), 7.0))
        np.testing.assert_array_equal(n, 0.0)
        np.testing.assert_array_equal(r, 7.0)

    @given(st.integers(0, 2**31))
    def test_channel_statistics(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 5), size=(4, 5, 6))
        n, _ = instance_normalize(f)
        var = f.var(axis=(1, 2))
        np.testing.assert_allclose(n.mean(axis=(1, 2)), 0.0, atol=1e-9)
        np.testing.assert_allclose(n.var(axis=(1, 2)), var / (var + EPS), atol=1e-6)

    def test_op_matches_function(self):
        f = np.random.default_rng(0).standard_normal((3, 4, 4))
        np.testing.assert_array_equal(instance_norm_op(None, const(f)).value, instance_normalize(f)[0])

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            instance_normalize(np.ones((4, 4)))


class TestAttention:
    def test_grid_points_are_cell_centers(self):
        np.testing.assert_allclose(grid_points(2, 4), [[0.125, 0.25], [0.375, 0.25], [0.625, 0.25], [0.875, 0.25], [0.125, 0.75], [0.375, 0.75], [0.625, 0.75], [0.875, 0.75]])

    def test_single_object_is_certain(self):
        att = layout_attention(Layout.from_boxes([[0.1, 0.1, 0.2, 0.2]]), (4, 4))
        np.testing.assert_array_equal(att.weights, 1.0)
        np.testing.assert_array_equal(att.mask, 1.0)

    def test_equidistant_objects(self):
        layout = Layout.from_boxes([[0.0, 0.4, 0.2, 0.6], [0.8, 0.4, 1.0, 0.6]])
        att = layout_attention(layout, (1, 1))
        np.testing.assert_allclose(att.weights, [[0.5, 0.5]], atol=1e-15)

    def test_two_object_example(self):
        # squared distances 0 and 0.5 from the single cell center (0.5, 0.5)
        layout = Layout.from_boxes([[0.4, 0.4, 0.6, 0.6], [0.0, 0.0, 0.0, 0.0]])
        w = layout_attention(layout, (1, 1)).weights[0]
        p0 = 1 / (1 + math.exp(-0.5))
        np.testing.assert_allclose(w, [p0, 1 - p0], atol=1e-15)
        np.testing.assert_allclose(w, [0.6225, 0.3775], atol=5e-5)

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        boxes = random_boxes(rng, 3)
        att = layout_attention(Layout.from_boxes(boxes), (3, 5))
        for m in range(3):
            for l in range(5):
                px, py = (l + 0.5) / 5, (m + 0.5) / 3
                logits = [-((px - (b[0] + b[2]) / 2) ** 2 + (py - (b[1] + b[3]) / 2) ** 2) for b in boxes]
                e = [math.exp(v) for v in logits]
                np.testing.assert_allclose(att.weights[m * 5 + l], [v / sum(e) for v in e], atol=1e-14)

    def test_bbox_mode_zero_distance_inside(self):
        boxes = [[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]]
        att = layout_attention(Layout.from_boxes(boxes), (1, 4), mode="bbox")
        # cell 0 lies inside box 0; distance to box 1 is 0.375
        w = att.weights[0]
        np.testing.assert_allclose(w[0] / w[1], math.exp(0.375**2), rtol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            layout_attention(Layout.from_boxes(np.zeros((0, 4))), (2, 2))
        with pytest.raises(ValueError):
            layout_attention(Layout.from_boxes([[0, 0, 1, 1]]), (2, 2), mode="gaussian")
        with pytest.raises(ValueError):
            Layout.from_boxes([[0, 0, 1.5, 1]])


class TestRestitution:
    def test_examples(self):
        n, r = np.zeros((1, 1, 2)), np.ones((1, 1, 2))
        np.testing.assert_allclose(restitute(n, r, np.array([[0.3, 1.0]])), [[[0.3, 1.0]]])
        np.testing.assert_array_equal(restitute(n, r, np.zeros((1, 2))), n)

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        n, r, m = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3)), rng.random((3, 3))
        out = restitute(n, r, m)
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    assert out[c, i, j] == pytest.approx(n[c, i, j] + r[c, i, j] * m[i, j], abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            restitute(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((3, 4)))

    def test_single_object_is_identity(self):
        f = np.random.default_rng(5).standard_normal((4, 6, 6)) * 3 + 1
        out = nrm_forward(f, Layout.from_boxes([[0.2, 0.3, 0.4, 0.9]]))
        np.testing.assert_array_equal(out, f)

    def test_far_from_objects_is_normalized(self):
        f = np.random.default_rng(6).standard_normal((2, 4, 4))
        boxes = random_boxes(np.random.default_rng(7), 6)
        out = nrm_forward(f, Layout.from_boxes(boxes))
        n, r = instance_normalize(f)
        mask = layout_attention(Layout.from_boxes(boxes), (4, 4)).mask
        np.testing.assert_allclose(out, n + r * mask[None], atol=1e-12)

    @pytest.mark.parametrize("mode", ["centroid", "bbox"])
    def test_op_gradient(self, mode):
        boxes = random_boxes(np.random.default_rng(8), 3)
        f = np.random.default_rng(9).standard_normal((3, 5, 5))
        build = lambda t, x: nrm_op(t, x, Layout.from_boxes(boxes), mode=mode)[0]
        assert check_op(build, [f], seed=0) < 1e-5

    def test_op_matches_function(self):
        boxes = random_boxes(np.random.default_rng(1), 4)
        f = np.random.default_rng(2).standard_normal((3, 5, 5))
        out, att = nrm_op(None, const(f), Layout.from_boxes(boxes), mode="bbox")
        np.testing.assert_array_equal(out.value, nrm_forward(f, Layout.from_boxes(boxes), mode="bbox"))
        assert att.mask.shape == (5, 5)
