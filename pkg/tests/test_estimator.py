import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crrn.estimator import ReflectionRemover
from crrn.exceptions import DimensionError
from crrn.image_model import clamp
from crrn.synthesis import iter_triplets, read_manifest
from crrn.validation import check_image, check_images, check_paired

FAST = dict(base_channels=4, stage1_epochs=1, joint_epochs_a=1, joint_epochs_b=1, sizes=["32x32"], random_state=1)


@pytest.fixture(scope="module")
def data(small_manifest):
    ts = [t for t in iter_triplets(read_manifest(small_manifest)) if t.mixture.shape[:2] == (32, 64)]
    return [t.mixture for t in ts], [t.background for t in ts], [t.reflection for t in ts]


@pytest.fixture(scope="module")
def fitted(data):
    X, y, R = data
    return ReflectionRemover(**FAST).fit(X, y, reflection=R)


def test_get_params_and_clone():
    est = ReflectionRemover(**FAST)
    params = est.get_params()
    assert params["base_channels"] == 4 and params["random_state"] == 1
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(gamma=0.5)
    assert est.gamma == 0.5


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        ReflectionRemover().predict([np.zeros((32, 32, 3))])


def test_fit_predict_shapes(fitted, data):
    X = data[0]
    pred = fitted.predict(X)
    assert pred.shape == (len(X), 32, 64, 3)
    assert np.array_equal(pred, fitted.transform(X))
    layers = fitted.predict_layers(X[:1])[0]
    assert layers["reflection"].shape == (32, 64, 3) and layers["gradient"].shape == (32, 64)
    assert 0.0 < fitted.score(X, data[1]) <= 1.0
    assert fitted.n_samples_seen_ == len(X)


def test_reflection_defaults_to_residual(data):
    X, y, _ = data
    est = ReflectionRemover(**{**FAST, "stage1_epochs": 1}).fit(X[:2], y[:2])
    assert est.train_log_.records


def test_indivisible_needs_auto_resize(fitted, rng):
    x = rng.random((40, 50, 3))
    with pytest.raises(DimensionError, match="auto-resize"):
        fitted.predict([x])
    fitted.set_params(auto_resize=True)
    try:
        out = fitted.predict_layers([x])[0]
    finally:
        fitted.set_params(auto_resize=False)
    assert out["background"].shape == (40, 50, 3) and out["gradient"].shape == (40, 50)


def test_save_and_reload(fitted, data, tmp_path):
    fitted.save(tmp_path / "m.pt")
    back = ReflectionRemover.from_checkpoint(tmp_path / "m.pt")
    assert back.base_channels == 4
    assert np.array_equal(back.predict(data[0][:2]), fitted.predict(data[0][:2]))


class TestValidation:
    def test_grayscale_broadcast(self):
        assert check_image(np.zeros((8, 8))).shape == (8, 8, 3)

    @pytest.mark.parametrize("bad", [np.full((8, 8, 3), 1.5), np.full((8, 8, 3), np.nan)])
    def test_range_and_finiteness(self, bad):
        with pytest.raises(ValueError):
            check_image(bad)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            check_image(np.zeros((4, 32, 3)))

    def test_batch_forms(self):
        assert len(check_images(np.zeros((2, 8, 8, 3)))) == 2
        assert len(check_images([np.zeros((8, 8)), np.zeros((9, 9, 3))])) == 2
        with pytest.raises(ValueError):
            check_images([])
        with pytest.raises(DimensionError):
            check_images(np.zeros((8, 8)))

    def test_paired(self):
        a = check_images([np.zeros((8, 8, 3))])
        with pytest.raises(DimensionError):
            check_paired(a, check_images([np.zeros((8, 9, 3))]))
        with pytest.raises(DimensionError):
            check_paired(a, [])

    def test_fit_mismatch(self, data):
        X, y, _ = data
        with pytest.raises(DimensionError):
            ReflectionRemover(**FAST).fit(X[:2], y[:1])

    def test_clamp_target(self, data):
        X, y, _ = data
        r = clamp(X[0] - y[0])
        assert r.min() >= 0 and r.max() <= 1
