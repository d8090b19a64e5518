import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from densetrack.adapt import (
    AdaptConfig,
    AppearanceNet,
    combined_loss,
    format_curve,
    frame_weights,
    harden,
    inject_drift,
    predict_appearance,
    train_appearance,
)
from densetrack.errors import ConfigError, ShapeError
from densetrack.ingest import Frame, MaskProbMap


def test_defaults():
    cfg = AdaptConfig()
    assert (cfg.iterations, cfg.lr, cfg.lr_step, cfg.lr_gamma, cfg.resolution) == (200, 2e-4, 50, 0.5, 480)


@given(st.integers(1, 200), st.floats(0.5, 1.0))
def test_frame_weights_mean_one_and_decreasing(n, decay):
    w = frame_weights(n, decay)
    assert w.mean() == pytest.approx(1.0)
    assert np.all(np.diff(w) <= 1e-12)


def test_frame_weight_validation():
    with pytest.raises(ValueError):
        frame_weights(0, 0.9)
    with pytest.raises(ValueError):
        frame_weights(3, 0.0)


def test_harden_is_argmax_one_hot():
    p = torch.tensor([[[[0.2]], [[0.5]], [[0.3]]]])
    assert harden(p)[0, :, 0, 0].tolist() == [0, 1, 0]


def test_combined_loss_hand_computed():
    # one pixel, two classes, prediction 0.8 / 0.2 for a class-0 target
    pred = torch.tensor([[[0.8]], [[0.2]]])
    pseudo = torch.tensor([[[0.9]], [[0.1]]])
    ce = -np.log(0.8)
    dice0 = (2 * 0.8 + 1) / (0.8 + 1 + 1)
    dice1 = (0 + 1) / (0.2 + 0 + 1)
    expected = ce + 1 - (dice0 + dice1) / 2
    assert combined_loss(pred, pseudo).item() == pytest.approx(expected, rel=1e-6)
    assert combined_loss(pred, pseudo, 2.0).item() == pytest.approx(2 * expected, rel=1e-6)
    assert combined_loss(pred, pseudo, w_dice=0).item() == pytest.approx(ce, rel=1e-6)


def test_combined_loss_from_logits_matches_probabilities():
    logits = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(0))
    pseudo = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
    a = combined_loss(logits, pseudo, from_logits=True)
    b = combined_loss(torch.softmax(logits, 1), pseudo)
    assert a.item() == pytest.approx(b.item(), rel=1e-5)
    with pytest.raises(ShapeError):
        combined_loss(logits, pseudo[:, :2])


def test_config_validation():
    with pytest.raises(ConfigError):
        AdaptConfig(w_ce=0, w_dice=0)
    with pytest.raises(ConfigError):
        AdaptConfig(resolution=30)
    with pytest.raises(ConfigError):
        AppearanceNet(1)


def test_appearance_net_shape():
    net = AppearanceNet(3, widths=(8, 16, 32))
    assert net(torch.zeros(2, 3, 32, 48)).shape == (2, 3, 32, 48)


def _tiny_video(n=4, size=32):
    rng = np.random.default_rng(0)
    frames, masks = [], []
    for k in range(n):
        px = np.full((3, size, size), 0.2, np.float32) + 0.05 * rng.random((3, size, size), dtype=np.float32)
        lab = np.zeros((size, size), np.uint8)
        lab[8:20, 8 + k : 20 + k] = 1
        px[0, lab == 1] = 0.9
        frames.append(Frame(px, "RGB", k))
        masks.append(MaskProbMap.from_labels(lab, 1))
    return frames, masks


def test_training_is_deterministic_and_records_curve():
    frames, masks = _tiny_video()
    cfg = AdaptConfig(iterations=6, resolution=32, widths=(4, 8, 8), batch_size=2, curve_every=3)
    a = train_appearance(frames, masks, cfg, oracle_masks=masks)
    b = train_appearance(frames, masks, cfg, oracle_masks=masks)
    assert a.losses == b.losses
    assert [c[0] for c in a.curve] == [0, 3, 6]
    assert np.isnan(a.curve[0][1]) and not np.isnan(a.curve[-1][3])
    assert format_curve(a.curve).count("\n") == 3
    probs = predict_appearance(a.model, frames[1], 32)
    assert probs.probs.shape == (2, 32, 32)
    np.testing.assert_allclose(probs.probs.sum(0), 1, atol=1e-5)


def test_degenerate_targets_warn():
    frames, masks = _tiny_video(2)
    empty = [MaskProbMap.from_labels(np.zeros((32, 32), np.uint8), 1)] * 2
    with pytest.warns(RuntimeWarning):
        train_appearance(frames, empty, AdaptConfig(iterations=1, resolution=32, widths=(4, 8, 8), curve_every=0))
    with pytest.raises(ShapeError):
        train_appearance(frames, masks[:1], AdaptConfig(iterations=1))


def test_inject_drift():
    _, masks = _tiny_video(4)
    drifted = inject_drift(masks, (28, 28), 2, start=2)
    assert drifted[0] is masks[0] and drifted[1] is masks[1]
    assert drifted[2].labels()[28, 28] == 1 and masks[2].labels()[28, 28] == 0
    assert drifted[3].labels()[28, 24] == 0
