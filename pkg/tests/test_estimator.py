import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from layoutsgg import SceneGraphModel
from layoutsgg.scenes import GeneratorConfig, generate_dataset, rasterize

TINY = GeneratorConfig(width=16, height=16, min_objects=2, max_objects=3, min_side=3, max_side=8)


def small(**kw):
    return SceneGraphModel(channels=(3, 4, 4), feature_dim=6, epochs=2, lr=0.05, **kw)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(2, 10, TINY)


@pytest.fixture(scope="module")
def fitted(scenes):
    return small(enable_nrm=True, enable_lee=True).fit(scenes)


def test_params_and_clone():
    est = small(fusion="concat", random_state=4)
    params = est.get_params()
    assert params["fusion"] == "concat" and params["random_state"] == 4
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(task="sgcls")
    assert est.task == "sgcls"


def test_fit_predict_score(fitted, scenes):
    assert fitted.method_ == "nrm_centroid+lee_gate"
    assert len(fitted.loss_curve_) == 2
    preds = fitted.predict(scenes[:3])
    assert len(preds) == 3
    np.testing.assert_array_equal(preds[0].obj_labels, scenes[0].categories())
    assert 0.0 <= fitted.score(scenes, k=20) <= 1.0


def test_predict_corrupted_and_perturbed(fitted, scenes):
    clean = fitted.predict(scenes[:2])
    noisy = fitted.predict(scenes[:2], corruption="gaussian_noise", severity=5)
    jittered = fitted.predict(scenes[:2], perturb_bbox=0.3, seed=1)
    assert not np.array_equal(clean[0].pred_probs, noisy[0].pred_probs)
    assert not np.array_equal(clean[0].pred_probs, jittered[0].pred_probs)
    again = fitted.predict(scenes[:2], corruption="gaussian_noise", severity=5)
    np.testing.assert_array_equal(noisy[1].pred_probs, again[1].pred_probs)


def test_predict_image(fitted, scenes):
    s = scenes[0]
    a = fitted.predict_image(rasterize(s), s.normalized_boxes(), s.categories())
    np.testing.assert_array_equal(a.pred_probs, fitted.predict([s])[0].pred_probs)
    with pytest.raises(ValueError):
        fitted.predict_image(np.zeros((3, 8, 8)), s.normalized_boxes(), s.categories())
    with pytest.raises(ValueError):
        fitted.predict_image(rasterize(s), [[0.5, 0.5, 0.2, 0.9]], [0])


def test_same_seed_same_model(scenes):
    a = small(enable_lee=True).fit(scenes)
    b = small(enable_lee=True).fit(scenes)
    assert a.loss_curve_ == b.loss_curve_
    assert a.params_.flat().tobytes() == b.params_.flat().tobytes()


def test_save_load(fitted, scenes, tmp_path):
    path = tmp_path / "m.rsgg"
    fitted.save(path)
    loaded = SceneGraphModel.load(path)
    assert loaded.get_params() == fitted.get_params()
    assert loaded.loss_curve_ == fitted.loss_curve_
    np.testing.assert_array_equal(loaded.predict(scenes[:1])[0].scores, fitted.predict(scenes[:1])[0].scores)


def test_input_validation(scenes):
    with pytest.raises(NotFittedError):
        small().predict(scenes)
    with pytest.raises(ValueError):
        small().fit([])
    with pytest.raises(TypeError):
        small().fit([{"id": 0}])
    with pytest.raises(ValueError):
        small(n_categories=2).fit(scenes)
