"""End-to-end acceptance criteria, each checked at its stated tolerance and time budget.

Every test reports a PASS/FAIL line (see ``criterion`` in conftest) with the
measured quantity, so a run of this file doubles as a results table.
"""

import json
import time

import numpy as np
import pytest
import torch

from densetrack import cli
from densetrack.adapt import AdaptConfig, inject_drift, predict_appearance, train_appearance
from densetrack.correspond import FeatureMap, reconstruct, restricted_affinity, smoothed
from densetrack.memory import MomentumPair, momentum_update
from densetrack.metrics import contour_accuracy, evaluate_sequence, region_similarity
from densetrack.synthgen import occlusion_corpus, translation_corpus
from densetrack.track import run_tracking
from oracles import boundary_f, dense_affinity, ema_closed_form, gradient_agreement, naive_propagate, region_j


def _mean_j(outputs, seq):
    preds = [o.labels() for o in outputs]
    gts = [m.labels() for m in seq.masks]
    return float(np.mean([r.J_mean for r in evaluate_sequence(seq.name, preds, gts)]))


def test_affinity_correctness(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_err, worst_row = 0.0, 0.0
    for _ in range(200):
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 64 // h + 1))
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 17))
        side = int(rng.choice([1, 3, 5, 7, 9]))
        q = rng.standard_normal((d, h, w)).astype(np.float32)
        refs = rng.standard_normal((k, d, h, w)).astype(np.float32)
        aff = restricted_affinity(FeatureMap(torch.from_numpy(q)), [FeatureMap(torch.from_numpy(r)) for r in refs], side)
        ours = aff.to_dense().double().numpy()
        worst_err = max(worst_err, float(np.abs(ours - dense_affinity(q, refs, side)).max()))
        worst_row = max(worst_row, float(np.abs(ours.sum(1) - 1).max()))
    elapsed = time.perf_counter() - start
    criterion(f"max err {worst_err:.2e}, max |row sum - 1| {worst_row:.2e}")
    assert worst_err <= 1e-6 and worst_row <= 1e-5 and elapsed < 30


def test_momentum_algebra(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for m in [0.999] + [float(rng.uniform(0, 0.9999)) for _ in range(99)]:
        n = int(rng.integers(0, 101))
        torch.manual_seed(int(rng.integers(1 << 30)))
        q, r = torch.nn.Linear(3, 2).double(), torch.nn.Linear(3, 2).double()
        r0 = [p.detach().clone() for p in r.parameters()]
        pair = MomentumPair(q, r, m)
        for _ in range(n):
            momentum_update(pair)
        for got, a, b in zip(r.parameters(), r0, q.parameters()):
            want = ema_closed_form(a, b.detach(), m, n)
            worst = max(worst, float((got.detach() - want).abs().max()))
    assert MomentumPair.from_encoder(torch.nn.Linear(1, 1)).m == 0.999
    elapsed = time.perf_counter() - start
    criterion(f"max deviation {worst:.2e} over 100 tuples")
    assert worst <= 1e-7 and elapsed < 5


def test_propagation_exactness(criterion):
    start = time.perf_counter()
    h = w = 8
    eye = torch.eye(h * w).view(h * w, h, w) * 1e3
    aff = restricted_affinity(FeatureMap(eye), [FeatureMap(eye), FeatureMap(eye)], 5)
    refs = torch.rand(2, 3, h, w, generator=torch.Generator().manual_seed(0))
    refs[1] = refs[0]  # both references hold the same mask, so the average is that mask
    exact = torch.equal(reconstruct(aff, refs), refs[0])
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 4))
        q = rng.standard_normal((4, 3, 3)).astype(np.float32)
        r = rng.standard_normal((k, 4, 3, 3)).astype(np.float32)
        a = restricted_affinity(FeatureMap(torch.from_numpy(q)), [FeatureMap(torch.from_numpy(x)) for x in r], 3)
        values = rng.random((k, 2, 3, 3)).astype(np.float32)
        ours = reconstruct(a, torch.from_numpy(values)).double().numpy()
        worst = max(worst, float(np.abs(ours - naive_propagate(dense_affinity(q, r, 3), values)).max()))
    elapsed = time.perf_counter() - start
    criterion(f"identity bit-exact {exact}, 3x3 max err {worst:.2e}")
    assert exact and worst <= 1e-6 and elapsed < 5


def test_gradient_check(criterion):
    start = time.perf_counter()
    frac = gradient_agreement(seed=0, samples=200)
    elapsed = time.perf_counter() - start
    criterion(f"{frac:.1%} of 200 sampled parameters agree within 1e-3")
    assert frac >= 0.95 and elapsed < 60


@pytest.mark.slow
def test_training_smoke(criterion, smoke_training):
    s = smoothed(smoke_training.losses, 20)
    ratio = s[-1] / s[0]
    elapsed = smoke_training.log[-1][2]
    criterion(f"smoothed loss {s[0]:.4f} -> {s[-1]:.4f} (ratio {ratio:.2f}) in {elapsed:.0f}s of training")
    assert ratio <= 0.5 and elapsed < 40 * 60


@pytest.mark.slow
def test_tracking_fidelity(criterion, smoke_pair):
    start = time.perf_counter()
    corpus = translation_corpus(2, seed=1, frame_size=128)
    js = [_mean_j(run_tracking(seq, smoke_pair, K=5, window_side=25), seq) for seq in corpus]
    elapsed = time.perf_counter() - start
    criterion(f"mean J {np.mean(js):.3f} (per video {np.round(js, 3).tolist()})")
    assert np.mean(js) >= 0.9 and elapsed < 5 * 60


@pytest.mark.slow
def test_memory_directionality(criterion, smoke_pair):
    start = time.perf_counter()
    corpus = occlusion_corpus(2, seed=2, frame_size=128)
    runs = {"K=1": (1, "previous_only"), "K=5": (5, "first_plus_recent"), "full": (None, "full_history")}
    scores = {}
    for label, (k, policy) in runs.items():
        js = [_mean_j(run_tracking(s, smoke_pair, K=k or len(s), policy=policy), s) for s in corpus]
        scores[label] = float(np.mean(js))
    elapsed = time.perf_counter() - start
    criterion(", ".join(f"{k} J {v:.3f}" for k, v in scores.items()))
    assert scores["K=5"] > scores["K=1"]
    assert abs(scores["full"] - scores["K=5"]) <= 0.05
    assert elapsed < 10 * 60


@pytest.mark.slow
def test_adaptation_directionality(criterion):
    start = time.perf_counter()
    seq = translation_corpus(1, seed=5, frame_size=128)[0]
    clean = [m.labels() for m in seq.masks]
    pseudo = inject_drift(seq.masks, (100, 64), 14, start=5)
    drifted = list(range(5, len(seq)))

    def mean_j(labels, frames):
        return float(np.mean([region_similarity(labels[k] == 1, clean[k] == 1) for k in frames]))

    pre = mean_j([m.labels() for m in pseudo], range(1, len(seq)))
    pseudo_on_drift = mean_j([m.labels() for m in pseudo], drifted)
    cfg = AdaptConfig(resolution=128, widths=(16, 32, 64), curve_every=10)
    result = train_appearance(seq.frames, pseudo, cfg, oracle_masks=seq.masks, curve_frames=drifted)
    post_labels = [None] + [predict_appearance(result.model, f, 128).labels() for f in seq.frames[1:]]
    post = mean_j(post_labels, range(1, len(seq)))
    best = max(c[3] for c in result.curve)
    elapsed = time.perf_counter() - start
    criterion(f"J pre {pre:.3f} -> post {post:.3f}; drifted frames: targets {pseudo_on_drift:.3f}, best model {best:.3f}")
    assert post - pre >= 0.02
    assert best > pseudo_on_drift
    assert elapsed < 10 * 60


def test_metric_oracle_equivalence(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(10_000):
        density = rng.uniform(0.05, 0.95, size=2)
        a = rng.random((8, 8)) < density[0]
        b = rng.random((8, 8)) < density[1]
        mismatches += region_similarity(a, b) != region_j(a, b)
        mismatches += contour_accuracy(a, b) != boundary_f(a, b)
    gt = np.zeros((100, 100), bool)
    gt[30:70, 30:70] = True
    for shift in (0, 1, 2, 3, 5, 8):
        pred = np.roll(gt, shift, axis=1)
        mismatches += contour_accuracy(pred, gt) != boundary_f(pred, gt)
        mismatches += region_similarity(pred, gt) != region_j(pred, gt)
    elapsed = time.perf_counter() - start
    criterion(f"{mismatches} mismatches over 10000 random pairs and 6 shift cases")
    assert mismatches == 0 and elapsed < 60


@pytest.mark.slow
def test_determinism(criterion, smoke_checkpoint, tmp_path):
    start = time.perf_counter()
    config = {
        "simulate": {"kind": "translation", "count": 1, "frame_size": 64, "length": 12},
        "track": {"short_side": None},
        "adapt": {"resolution": 64, "widths": [16, 32, 64], "iterations": 40},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    cfg = str(tmp_path / "cfg.json")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "corpus")]) == 0
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main([
            "track", "--config", cfg, "--corpus", str(tmp_path / "corpus"), "--checkpoint",
            str(smoke_checkpoint), "--adapt", "--seed", "7", "--out", str(out),
        ])
        assert rc == 0
        files = sorted(p for p in out.rglob("*") if p.suffix in {".png", ".json", ".tsv"})
        runs.append({p.relative_to(out): p.read_bytes() for p in files})
    same = runs[0] == runs[1]
    n_png = sum(1 for p in runs[0] if p.suffix == ".png")
    elapsed = time.perf_counter() - start
    criterion(f"{n_png} PNGs and report identical: {same}")
    assert same and n_png == 12 and any(p.name == "report.json" for p in runs[0])
