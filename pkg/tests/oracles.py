"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def dense_affinity(query: np.ndarray, refs: np.ndarray, side: int) -> np.ndarray:
    """Masked softmax over the full (K * hw) candidate set.

    query (d, h, w), refs (K, d, h, w) -> (hw, K * hw). A candidate (k, y', x')
    is admissible for (y, x) iff |y' - y| <= r and |x' - x| <= r.
    """
    k, d, h, w = refs.shape
    r = side // 2
    q = query.reshape(d, h * w).T.astype(np.float64)
    out = np.zeros((h * w, k * h * w))
    for p in range(h * w):
        py, px = divmod(p, w)
        logits, cols = [], []
        for kk in range(k):
            for y in range(h):
                for x in range(w):
                    if abs(y - py) <= r and abs(x - px) <= r:
                        logits.append(float(q[p] @ refs[kk, :, y, x].astype(np.float64)))
                        cols.append(kk * h * w + y * w + x)
        logits = np.array(logits)
        e = np.exp(logits - logits.max())
        out[p, cols] = e / e.sum()
    return out


def naive_propagate(dense: np.ndarray, values: np.ndarray) -> np.ndarray:
    """values (K, C, h, w) -> (C, h, w) by explicit weighted sums over the dense matrix."""
    k, c, h, w = values.shape
    flat = values.transpose(1, 0, 2, 3).reshape(c, k * h * w)
    out = np.zeros((c, h * w))
    for p in range(h * w):
        for j in range(k * h * w):
            if dense[p, j] != 0.0:
                out[:, p] += dense[p, j] * flat[:, j]
    return out.reshape(c, h, w)


def ema_closed_form(r0, q, m: float, n: int):
    return m**n * r0 + (1 - m**n) * q


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = union = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def boundary_pixels(mask: np.ndarray) -> list[tuple[int, int]]:
    """Foreground pixels with a 4-neighbour inside the image that is background."""
    h, w = mask.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and not mask[yy, xx]:
                    out.append((y, x))
                    break
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    if tol is None:
        tol = math.ceil(0.008 * math.hypot(*pred.shape))
    pb, gb = boundary_pixels(pred.astype(bool)), boundary_pixels(gt.astype(bool))
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def near(p, pts):
        return any((p[0] - a) ** 2 + (p[1] - b) ** 2 <= tol**2 for a, b in pts)

    precision = sum(near(p, gb) for p in pb) / len(pb)
    recall = sum(near(g, pb) for g in gb) / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def region_j(pred: np.ndarray, gt: np.ndarray) -> float:
    return iou(pred.astype(bool), gt.astype(bool))


def gradient_agreement(seed: int = 0, samples: int = 80, eps: float = 1e-6, rel: float = 1e-3):
    """Analytic vs central-difference gradients of loss(reconstruct(affinity(encode(.)))).

    Runs a two-layer toy encoder in float64 and returns the fraction of
    sampled scalar parameters whose gradients agree within ``rel``.
    """
    import torch

    from densetrack.correspond import (
        Encoder,
        EncoderConfig,
        affinity_weights,
        aggregate,
        downsample,
        photometric_loss,
    )

    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    enc = Encoder(EncoderConfig(widths=(4, 8), blocks=(0, 0), strides=(2, 2), head=False, norm=False)).double()
    frames = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    targets = downsample(frames)

    def loss_fn():
        f = enc(frames)
        w = affinity_weights(f[1:], f[None, :1], 3)
        pred = aggregate(w, targets[None, :1])
        return photometric_loss(pred, targets[1:])

    enc.zero_grad()
    loss_fn().backward()
    params = [p for p in enc.parameters()]
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(samples):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn().item()
            p[idx] = orig - eps
            down = loss_fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        agree += abs(analytic - numeric) <= rel * scale or scale < 1e-12
    return agree / samples
