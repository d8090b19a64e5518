import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densetrack.errors import CoverageError, ShapeError
from densetrack.ingest import save_palette_png
from densetrack.metrics import (
    EvalReport,
    ObjectRecord,
    boundary,
    contour_accuracy,
    default_tolerance,
    evaluate_arrays,
    evaluate_corpus,
    evaluate_sequence,
    region_similarity,
)
from oracles import boundary_f, boundary_pixels, region_j

masks = st.integers(1, 12).flatmap(lambda h: st.integers(1, 12).flatmap(
    lambda w: st.tuples(arrays(bool, (h, w)), arrays(bool, (h, w)))
))


@given(masks, st.integers(0, 3))
def test_j_and_f_match_oracles(pair, tol):
    a, b = pair
    assert region_similarity(a, b) == region_j(a, b)
    assert contour_accuracy(a, b, tol) == boundary_f(a, b, tol)


@given(arrays(bool, (9, 7)))
def test_boundary_matches_oracle(m):
    ours = set(zip(*np.nonzero(boundary(m))))
    assert ours == set(boundary_pixels(m))


def test_empty_mask_conventions():
    z = np.zeros((5, 5), bool)
    o = z.copy()
    o[2, 2] = True
    assert region_similarity(z, z) == 1.0 and contour_accuracy(z, z) == 1.0
    assert region_similarity(o, z) == 0.0 and contour_accuracy(o, z) == 0.0


def test_default_tolerance():
    assert default_tolerance((480, 854)) == 8
    assert default_tolerance((8, 8)) == 1


@pytest.mark.parametrize("shift", [0, 1, 2, 3, 5])
def test_boundary_shift_cases(shift):
    gt = np.zeros((100, 100), bool)
    gt[30:70, 30:70] = True
    pred = np.roll(gt, shift, axis=1)
    f = contour_accuracy(pred, gt)
    assert f == boundary_f(pred, gt)
    if shift <= default_tolerance(gt.shape):
        assert f == 1.0
    else:
        assert f < 1.0
    assert region_similarity(pred, gt) == pytest.approx((40 - shift) * 40 / ((40 + shift) * 40))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        region_similarity(np.zeros((2, 2)), np.zeros((2, 3)))


def _labels(seed, n=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = np.zeros((16, 16), np.uint8)
        y, x = rng.integers(0, 8, 2)
        m[y : y + 6, x : x + 6] = 1
        m[10:14, 10:14] = 2
        out.append(m)
    return out


def test_perfect_predictions_score_one():
    gt = _labels(0)
    report = evaluate_arrays({"a": gt}, {"a": gt})
    s = report.summary
    assert s["J_mean"] == s["F_mean"] == s["JF_mean"] == s["J_recall"] == 1.0
    assert len(report.records) == 2


def test_frame_zero_is_not_scored():
    gt = _labels(0)
    pred = [np.zeros_like(gt[0])] + gt[1:]
    assert evaluate_arrays({"a": pred}, {"a": gt}).summary["J_mean"] == 1.0


def test_sparse_annotations_and_coverage():
    gt = _labels(0)
    sparse = [gt[0], None, gt[2], None]
    recs = evaluate_sequence("a", [gt[0], None, gt[2], None], sparse)
    assert all(len(r.J_frames) == 1 for r in recs)
    with pytest.raises(CoverageError):
        evaluate_sequence("a", [gt[0], gt[1], None, gt[3]], gt)
    with pytest.raises(CoverageError):
        evaluate_arrays({}, {"a": gt})


def test_recall_threshold_and_overall():
    recs = [
        ObjectRecord("s", 1, 0.9, 0.8, [], [], "seen"),
        ObjectRecord("t", 1, 0.4, 0.6, [], [], "seen"),
        ObjectRecord("u", 1, 0.7, 0.5, [], [], "unseen"),
    ]
    report = EvalReport(recs)
    assert report.summary["J_recall"] == pytest.approx(2 / 3)
    assert report.summary["F_recall"] == pytest.approx(2 / 3)  # 0.5 is not above the threshold
    splits = report.split_summary()
    assert splits["overall"]["score"] == pytest.approx((0.65 + 0.7 + 0.7 + 0.5) / 4)


def test_report_files(tmp_path):
    gt = _labels(1)
    report = evaluate_arrays({"a": gt}, {"a": gt})
    report.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["summary"]["JF_mean"] == 1.0
    assert "mean" in (tmp_path / "report.txt").read_text()


def test_evaluate_corpus_from_disk(tmp_path):
    gt = _labels(2)
    for k, m in enumerate(gt):
        save_palette_png(m, tmp_path / "gt" / "Annotations" / "seq" / f"{k:05d}.png")
        save_palette_png(m if k != 2 else np.zeros_like(m), tmp_path / "pred" / "seq" / f"{k:05d}.png")
    report = evaluate_corpus(tmp_path / "pred", tmp_path / "gt")
    assert report.summary["J_mean"] == pytest.approx(2 / 3)
    (tmp_path / "pred" / "seq" / "00003.png").unlink()
    with pytest.raises(CoverageError):
        evaluate_corpus(tmp_path / "pred", tmp_path / "gt")
