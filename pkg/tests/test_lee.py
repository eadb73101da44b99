import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutsgg import autograd as ag
from layoutsgg.autograd import Tape, Var, const, finite_diff_check
from layoutsgg.gradcheck import _tiny_config
from layoutsgg.lee import (
    PAIR_GEOMETRY_DIM,
    canonical_fusion,
    decode,
    embed_object_bbox,
    encode_object,
    encode_predicate,
    gate_fuse,
    pair_geometry,
)
from layoutsgg.pipeline import init_params, ordered_pairs


def boxes_for(rng, n):
    lo = rng.uniform(0, 0.6, size=(n, 2))
    return np.hstack([lo, lo + rng.uniform(0.05, 0.4, size=(n, 2))])


@pytest.fixture(scope="module")
def lee_params():
    return init_params(_tiny_config(enable_lee=True), seed=3)


class TestGate:
    def test_example(self):
        f, f_c = const([[1.0, 0.0]]), const([[0.0, 1.0]])
        w = const([[1.0, 0.0], [0.0, 0.0]])
        out, z = gate_fuse(None, f, f_c, w, "gate")
        s1 = 1 / (1 + math.exp(-1))
        np.testing.assert_allclose(z.value, [[s1, 0.5]], atol=1e-15)
        np.testing.assert_allclose(out.value, [[s1, 0.5]], atol=1e-15)
        assert out.value[0, 0] == pytest.approx(0.731, abs=5e-4)

    def test_zero_weight_is_even_mixture(self):
        rng = np.random.default_rng(0)
        f, f_c = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        out, z = gate_fuse(None, const(f), const(f_c), const(np.zeros((3, 3))))
        np.testing.assert_array_equal(z.value, 0.5)
        np.testing.assert_array_equal(out.value, 0.5 * (f + f_c))

    def test_equal_inputs_pass_through(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((4, 3))
        out, _ = gate_fuse(None, const(f), const(f), const(rng.standard_normal((3, 3))))
        np.testing.assert_array_equal(out.value, f)

    def test_other_modes(self):
        rng = np.random.default_rng(2)
        f, f_c = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        out, z = gate_fuse(None, const(f), const(f_c), None, "add")
        assert z is None
        np.testing.assert_array_equal(out.value, f + f_c)
        p = rng.standard_normal((3, 6))
        out, _ = gate_fuse(None, const(f), const(f_c), const(p), "concat_proj")
        np.testing.assert_allclose(out.value, np.hstack([f, f_c]) @ p.T, atol=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            gate_fuse(None, const(np.ones((2, 3))), const(np.ones((2, 4))), const(np.eye(3)))
        with pytest.raises(ValueError):
            gate_fuse(None, const(np.ones((2, 3))), const(np.ones((2, 3))), const(np.eye(4)))
        with pytest.raises(ValueError):
            canonical_fusion("film")

    @given(st.integers(0, 2**31), st.floats(0.1, 20))
    def test_convex_and_open_unit_interval(self, seed, scale):
        rng = np.random.default_rng(seed)
        f, f_c = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        out, z = gate_fuse(None, const(f), const(f_c), const(scale * rng.standard_normal((4, 4)) / 4))
        assert np.all((z.value > 0) & (z.value < 1))
        assert np.all(out.value >= np.minimum(f, f_c))
        assert np.all(out.value <= np.maximum(f, f_c))


class TestCoordinateEmbeddings:
    def test_pair_geometry(self):
        bi = np.array([[0.0, 0.0, 0.2, 0.4]])
        bj = np.array([[0.5, 0.5, 0.7, 0.9]])
        g = pair_geometry(bi, bj)
        assert g.shape == (1, PAIR_GEOMETRY_DIM)
        np.testing.assert_allclose(g[0, 8:10], [-0.5, -0.5])
        assert g[0, 10] == pytest.approx(1.0, abs=1e-15)
        swapped = pair_geometry(bj, bi)
        np.testing.assert_array_equal(swapped[0, 8:10], -g[0, 8:10])
        assert swapped[0, 10] == g[0, 10]
        np.testing.assert_array_equal(pair_geometry(bi, bi)[0, 8:], 0.0)

    def test_object_embedding_loop_oracle(self, lee_params):
        boxes = boxes_for(np.random.default_rng(0), 3)
        got = embed_object_bbox(None, boxes, lee_params).value
        p = {k: lee_params[k].value for k in ("lee_obj.w1", "lee_obj.b1", "lee_obj.w2", "lee_obj.b2")}
        for r, b in enumerate(boxes):
            hidden = [max(0.0, sum(p["lee_obj.w1"][i, t] * b[t] for t in range(4)) + p["lee_obj.b1"][i]) for i in range(len(p["lee_obj.b1"]))]
            for i in range(len(p["lee_obj.b2"])):
                ref = sum(p["lee_obj.w2"][i, t] * hidden[t] for t in range(len(hidden))) + p["lee_obj.b2"][i]
                assert got[r, i] == pytest.approx(ref, abs=1e-14)

    def test_zero_weights_give_zero(self, lee_params):
        params = lee_params.copy()
        for k in ("lee_obj.w1", "lee_obj.b1", "lee_obj.w2", "lee_obj.b2"):
            params[k].value[...] = 0.0
        np.testing.assert_array_equal(embed_object_bbox(None, boxes_for(np.random.default_rng(1), 2), params).value, 0.0)


class TestEncoders:
    def _inputs(self, rng, cfg, n):
        v = const(rng.standard_normal((n, cfg.channels[-1])))
        return v, rng.integers(0, cfg.n_categories, size=n), boxes_for(rng, n)

    def test_lee_disabled_reproduces_baseline(self, lee_params):
        base = init_params(_tiny_config(), seed=3)
        rng = np.random.default_rng(2)
        v, cats, boxes = self._inputs(rng, base.config, 4)
        a = encode_object(None, v, cats, boxes, base, lee_enabled=False)
        b = encode_object(None, v, cats, boxes, lee_params, lee_enabled=False)
        assert a.f_prime.value.tobytes() == b.f_prime.value.tobytes()
        assert a.f_C is None and a.z is None and a.f_prime is a.f

    def test_identical_inputs_identical_outputs(self, lee_params):
        rng = np.random.default_rng(3)
        v, cats, boxes = self._inputs(rng, lee_params.config, 3)
        a = encode_object(None, v, cats, boxes, lee_params, True)
        b = encode_object(None, v, cats, boxes, lee_params, True)
        np.testing.assert_array_equal(a.f_prime.value, b.f_prime.value)
        assert np.all((a.z.value > 0) & (a.z.value < 1))

    def test_unknown_category(self, lee_params):
        rng = np.random.default_rng(4)
        v, _, boxes = self._inputs(rng, lee_params.config, 2)
        with pytest.raises(ValueError):
            encode_object(None, v, [0, 99], boxes, lee_params, True)

    def test_missing_categories_use_zero_embedding(self, lee_params):
        rng = np.random.default_rng(5)
        v, cats, boxes = self._inputs(rng, lee_params.config, 2)
        params = lee_params.copy()
        params["cat_emb"].value[...] = 0.0
        a = encode_object(None, v, cats, boxes, params, True)
        b = encode_object(None, v, None, boxes, params, True)
        np.testing.assert_array_equal(a.f_prime.value, b.f_prime.value)

    def test_object_encoder_gradient(self, lee_params):
        rng = np.random.default_rng(6)
        v0, cats, boxes = self._inputs(rng, lee_params.config, 3)
        w = rng.standard_normal((3, lee_params.config.feature_dim))

        def f(x):
            v = Var(x)
            tape = Tape()
            out = encode_object(tape, v, cats, boxes, lee_params, True).f_prime
            tape.backward(out, w)
            lee_params.zero_grad()
            return float((out.value * w).sum()), v.grad

        assert finite_diff_check(f, v0.value) < 1e-5

    def test_predicate_rows_depend_only_on_their_pair(self, lee_params):
        rng = np.random.default_rng(7)
        cfg = lee_params.config
        n = 4
        f_obj = const(rng.standard_normal((n, cfg.feature_dim)))
        boxes = boxes_for(rng, n)
        pairs = ordered_pairs(n)
        v_union = rng.standard_normal((len(pairs), cfg.channels[-1]))
        full = encode_predicate(None, f_obj, pairs, const(v_union), boxes, lee_params, True)
        pick = rng.permutation(len(pairs))[:5]
        sub = encode_predicate(None, f_obj, pairs[pick], const(v_union[pick]), boxes, lee_params, True)
        np.testing.assert_array_equal(sub.f_prime.value, full.f_prime.value[pick])
        np.testing.assert_array_equal(sub.z.value, full.z.value[pick])

    def test_predicate_errors(self, lee_params):
        f_obj = const(np.zeros((2, lee_params.config.feature_dim)))
        u = const(np.zeros((1, lee_params.config.channels[-1])))
        with pytest.raises(ValueError):
            encode_predicate(None, f_obj, [[1, 1]], u, np.zeros((2, 4)), lee_params, True)
        with pytest.raises(ValueError):
            encode_predicate(None, f_obj, [[0, 1], [1, 0]], u, np.zeros((2, 4)), lee_params, True)


class TestDecoder:
    def test_uniform_logits_pick_first_class(self, lee_params):
        params = lee_params.copy()
        params["dec_pred.w"].value[...] = 0.0
        params["dec_pred.b"].value[...] = 0.0
        out = decode(None, const(np.ones((2, params.config.feature_dim))), params, "predicate")
        np.testing.assert_array_equal(out.labels, 0)
        np.testing.assert_allclose(out.probs, 1 / params["dec_pred.b"].value.size, atol=1e-15)

    def test_dominant_logit(self, lee_params):
        params = lee_params.copy()
        params["dec_obj.w"].value[...] = 0.0
        params["dec_obj.b"].value[...] = 0.0
        params["dec_obj.b"].value[5] = 30.0
        out = decode(None, const(np.ones((1, params.config.feature_dim))), params, "object")
        assert out.labels[0] == 5 and out.probs[0, 5] > 0.999999
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-15)
        assert isinstance(out.logits, ag.Var)

    def test_unknown_decoder(self, lee_params):
        with pytest.raises(ValueError):
            decode(None, const(np.ones((1, 6))), lee_params, "relation")
