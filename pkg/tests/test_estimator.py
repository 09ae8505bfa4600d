import doctest

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import supw.estimator
from supw.estimator import SuperpixelSegmenter, check_images, check_masks
from supw.synthdata import SOURCE, gen_sample


@pytest.fixture(scope="module")
def data():
    pairs = [gen_sample(SOURCE, 32, s) for s in range(6)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return SuperpixelSegmenter(epochs=2, input_size=32, n_segments=16).fit(X[:4], y[:4], X[4:], y[4:])


class TestValidation:
    def test_uint8_rescaled(self):
        im = np.full((4, 4, 3), 255, np.uint8)
        assert check_images([im])[0].max() == 1.0

    def test_single_image_promoted(self):
        assert len(check_images(np.zeros((4, 4, 3)))) == 1

    @pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((4, 4, 4)), np.full((4, 4, 3), 2.0),
                                     np.full((4, 4, 3), np.nan)])
    def test_bad_images(self, bad):
        with pytest.raises(ValueError):
            check_images([bad])

    def test_empty(self):
        with pytest.raises(ValueError):
            check_images([])

    def test_masks(self):
        ims = check_images([np.zeros((4, 4, 3))])
        assert check_masks([np.ones((4, 4), int)], ims)[0].dtype == bool
        with pytest.raises(ValueError):
            check_masks([np.full((4, 4), 2)], ims)
        with pytest.raises(ValueError):
            check_masks([np.ones((3, 4))], ims)
        with pytest.raises(ValueError):
            check_masks([], ims)


class TestEstimator:
    def test_params_round_trip(self):
        est = SuperpixelSegmenter(n_segments=64, compactness=20.0)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert twin.get_params()["n_segments"] == 64

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            SuperpixelSegmenter().predict(data[0])

    def test_predict(self, fitted, data):
        pred = fitted.predict(data[0])
        assert pred.shape == (6, 32, 32) and pred.dtype == bool
        assert len(fitted.runlog_.records) == 2

    def test_resolution_restored(self, fitted):
        im = gen_sample(SOURCE, 48, 9)[0]
        probs = fitted.predict_proba([im])
        assert probs.shape == (1, 48, 48)
        assert np.all((probs >= 0) & (probs <= 1))

    def test_mixed_sizes_give_list(self, fitted):
        ims = [gen_sample(SOURCE, 32, 1)[0], gen_sample(SOURCE, 40, 2)[0]]
        out = fitted.predict(ims)
        assert [o.shape for o in out] == [(32, 32), (40, 40)]

    def test_score_in_unit_interval(self, fitted, data):
        assert 0.0 <= fitted.score(*data) <= 1.0

    def test_deterministic(self, fitted, data):
        X, y = data
        again = SuperpixelSegmenter(epochs=2, input_size=32, n_segments=16).fit(X[:4], y[:4], X[4:], y[4:])
        np.testing.assert_array_equal(again.predict_proba(X), fitted.predict_proba(X))


def test_docstring_example():
    result = doctest.testmod(supw.estimator, verbose=False)
    assert result.attempted > 0 and result.failed == 0
