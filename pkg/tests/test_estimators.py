import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from densetrack import DenseTracker, OnlineAdapter
from densetrack.errors import ConfigError, ShapeError
from densetrack.synthgen import translation_corpus

FAST = dict(
    widths=(8, 16, 16), blocks=(1, 0, 0), crop=32, window_side=7, pairwise_iterations=3, batch_size=2,
    memory_iterations=2, memory_batch_size=1, n_references=3,
)


@pytest.fixture(scope="module")
def corpus():
    return translation_corpus(2, seed=0, frame_size=32, length=5)


def test_params_and_clone():
    est = DenseTracker(**FAST)
    params = est.get_params()
    assert params["window_side"] == 7 and params["momentum"] == 0.999
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(n_references=4)
    assert est.n_references == 4


def test_defaults_follow_the_paper():
    p = DenseTracker().get_params()
    assert (p["window_side"], p["crop"], p["n_references"], p["momentum"]) == (25, 384, 5, 0.999)
    a = OnlineAdapter().get_params()
    assert (a["iterations"], a["lr"], a["resolution"]) == (200, 2e-4, 480)


def test_unfitted_and_invalid():
    with pytest.raises(NotFittedError):
        DenseTracker().predict(None)
    with pytest.raises(ConfigError):
        DenseTracker(**{**FAST, "window_side": 4}).fit([])
    with pytest.raises(ConfigError):
        DenseTracker(**{**FAST, "momentum": 1.0}).fit([])
    with pytest.raises(ShapeError):
        DenseTracker(**FAST).fit([])


def test_fit_predict_score(corpus):
    est = DenseTracker(**FAST).fit(corpus)
    assert len(est.loss_curve_) == 3 and len(est.memory_loss_curve_) == 2
    labels = est.predict(corpus[0])
    assert len(labels) == 5 and labels[1].shape == (32, 32)
    np.testing.assert_array_equal(labels[0], corpus[0].masks[0].labels())
    probs = est.predict_proba(corpus[0])
    np.testing.assert_allclose(probs[2].sum(0), 1, atol=1e-5)
    feats = est.transform(corpus[0])
    assert feats[0].shape == (16, 8, 8)
    score = est.score(corpus)
    assert 0.0 <= score <= 1.0


def test_online_adapter(corpus):
    seq = corpus[0]
    frames = [np.moveaxis(f.pixels, 0, -1) for f in seq.frames]  # (H, W, 3) arrays are accepted too
    labels = [m.labels() for m in seq.masks]
    est = OnlineAdapter(iterations=3, resolution=32, widths=(4, 8, 8), batch_size=2, curve_every=1)
    est.fit(frames, labels, oracle=labels)
    assert est.n_classes_ == 2 and len(est.curve_) == 4
    out = est.predict(frames)
    assert out.shape == (5, 32, 32) and out.dtype == np.uint8
    with pytest.raises(ShapeError):
        est.fit(frames, labels[:2])
    with pytest.raises(NotFittedError):
        OnlineAdapter().predict(frames)
