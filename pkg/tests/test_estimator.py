import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from transcam.data import GeneratorSpec, labels_from_mask, render_sample
from transcam.estimator import TransCAMSegmenter, check_images, check_masks, check_multi_hot
from transcam.exceptions import ShapeError
from transcam.train import RunConfig, evaluate_miou

TINY_MODEL = dict(num_blocks=2, embed_dim=8, num_heads=2, grid=4, stage_channels=(4, 8), stem_channels=4,
                  conv_grid=8)


@pytest.fixture(scope="module")
def arrays():
    spec = GeneratorSpec(size=16, seed=2, radius_range=(0.25, 0.3))
    samples = [render_sample(spec, i) for i in range(10)]
    x = np.stack([s[0] for s in samples])
    masks = np.stack([s[1] for s in samples]).astype(np.int64)
    y = np.stack([labels_from_mask(m, 3) for m in masks])
    return x, y, masks


@pytest.fixture(scope="module")
def fitted(arrays):
    x, y, _ = arrays
    return TransCAMSegmenter(model_config=TINY_MODEL, epochs=1, batch_size=5, scales=(1.0,)).fit(x, y)


def test_params_and_clone():
    est = TransCAMSegmenter(epochs=3, tau=0.4)
    params = est.get_params()
    assert params["epochs"] == 3 and params["tau"] == 0.4
    assert params["lr"] == RunConfig.lr and params["attn_range"] == RunConfig.attn_range
    other = clone(est)
    assert other.get_params() == params and other is not est


def test_not_fitted():
    with pytest.raises(NotFittedError):
        TransCAMSegmenter().predict(np.zeros((1, 64, 64, 3)))


def test_fit_attributes(fitted, arrays):
    assert fitted.n_classes_ == 3 and len(fitted.metrics_) == 1
    assert fitted.config_.model.image_size == 16 and fitted.config_.model.num_fg_classes == 3


def test_decision_function_shape(fitted, arrays):
    z = fitted.decision_function(arrays[0])
    assert z.shape == (10, 3) and np.all(np.isfinite(z))


def test_transform_gates_with_given_labels(fitted, arrays):
    x, y, _ = arrays
    maps = fitted.transform(x, y)
    assert maps.shape == (10, 3, 16, 16)
    assert np.all(maps[y == 0] == 0)
    assert maps.min() >= 0 and maps.max() <= 1 + 1e-6


def test_transform_gates_with_predictions_by_default(fitted, arrays):
    x = arrays[0]
    predicted = (fitted.decision_function(x) > 0).astype(int)
    np.testing.assert_array_equal(fitted.transform(x), fitted.transform(x, predicted))


def test_predict_and_score_agree(fitted, arrays):
    x, y, masks = arrays
    pred = fitted.predict(x, y)
    assert pred.shape == (10, 16, 16) and pred.min() >= 0 and pred.max() <= 3
    assert fitted.score(x, masks, y) == pytest.approx(evaluate_miou(pred, masks, 4)[1], abs=1e-12)


def test_uint8_and_single_image_inputs(fitted, arrays):
    x = arrays[0]
    assert x.dtype == np.uint8
    np.testing.assert_array_equal(fitted.decision_function(x[:2]), fitted.decision_function(x[:2] / 255.0))
    assert fitted.decision_function(x[0]).shape == (1, 3)


def test_validation_helpers():
    with pytest.raises(ShapeError):
        check_images(np.zeros((2, 16, 12, 3)))
    with pytest.raises(ShapeError):
        check_images(np.zeros((2, 16, 16, 1)))
    with pytest.raises(ShapeError):
        check_images(np.zeros((1, 16, 16, 3)), image_size=32)
    with pytest.raises(ValueError):
        check_images(np.full((1, 16, 16, 3), 1.5))
    with pytest.raises(ValueError):
        check_images(np.full((1, 16, 16, 3), np.nan))
    assert check_images(np.full((16, 16, 3), 255, dtype=np.uint8)).max() == 1.0
    with pytest.raises(ShapeError):
        check_multi_hot(np.zeros((3, 2)), 4)
    with pytest.raises(ShapeError):
        check_multi_hot(np.zeros((3, 2)), 3, 4)
    with pytest.raises(ValueError):
        check_multi_hot(np.full((3, 2), 2), 3)
    with pytest.raises(ShapeError):
        check_masks(np.zeros((2, 8, 8)), 2, 16, 3)
    with pytest.raises(ValueError):
        check_masks(np.full((2, 16, 16), 5), 2, 16, 3)


def test_wrong_image_size_after_fit(fitted):
    with pytest.raises(ShapeError):
        fitted.predict(np.zeros((1, 32, 32, 3)))
