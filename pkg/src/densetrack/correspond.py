"""Self-supervised correspondence: bottleneck, encoder, restricted attention, reconstruction.

Tensor-level helpers take a leading batch axis and are what the training
loops call; the dataclass-level functions (:func:`encode`,
:func:`restricted_affinity`, :func:`reconstruct`) wrap them for single frames.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError
from .ingest import Frame, Sequence, crop_resize, lab_to_network, rgb_to_lab, sample_crop_box

log = logging.getLogger(__name__)

LAB_LOW = np.array([0.0, -128.0, -128.0], dtype=np.float32)[:, None, None]
LAB_HIGH = np.array([100.0, 127.0, 127.0], dtype=np.float32)[:, None, None]


# ---------------------------------------------------------------- bottleneck


@dataclass
class BottleneckConfig:
    jitter_prob: float = 0.3
    dropout_prob: float = 0.5
    # brightness shift as a fraction of each channel's range, contrast factor half-width
    brightness: float = 0.1
    contrast: float = 0.1

    def __post_init__(self):
        for name in ("jitter_prob", "dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.brightness < 0 or self.contrast < 0:
            raise ConfigError("jitter magnitudes must be >= 0")


def apply_bottleneck(frame: Frame, cfg: BottleneckConfig, rng: np.random.Generator) -> Frame:
    """Colour jitter then single-channel dropout on a Lab frame.

    Both coin flips are drawn on every call so the random stream does not
    depend on the outcomes.
    """
    if frame.color_space != "Lab":
        raise ValueError("the bottleneck operates on Lab frames")
    jitter = rng.uniform() < cfg.jitter_prob
    shift = rng.uniform(-cfg.brightness, cfg.brightness, size=3)
    gain = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast, size=3)
    drop = rng.uniform() < cfg.dropout_prob
    channel = int(rng.integers(0, 3))

    pixels = frame.pixels
    if jitter:
        span = (LAB_HIGH - LAB_LOW)[:, 0, 0]
        mean = pixels.mean(axis=(1, 2), keepdims=True)
        pixels = (pixels - mean) * gain[:, None, None].astype(np.float32) + mean
        pixels = pixels + (shift * span)[:, None, None].astype(np.float32)
        pixels = np.clip(pixels, LAB_LOW, LAB_HIGH)
    if drop:
        pixels = pixels.copy()
        pixels[channel] = 0.0
    if pixels is frame.pixels:
        pixels = pixels.copy()
    return Frame(pixels, "Lab", frame.index)


# ------------------------------------------------------------------- encoder


@dataclass
class EncoderConfig:
    """Architecture descriptor: stages of (stride, width, residual blocks) plus an optional 1x1 head."""

    widths: tuple[int, ...] = (64, 128, 256)
    blocks: tuple[int, ...] = (2, 2, 2)
    strides: tuple[int, ...] = (2, 2, 1)
    head: bool = True
    norm: bool = True

    def __post_init__(self):
        self.widths, self.blocks, self.strides = tuple(self.widths), tuple(self.blocks), tuple(self.strides)
        if not (len(self.widths) == len(self.blocks) == len(self.strides)) or not self.widths:
            raise ConfigError("widths, blocks and strides must have the same non-zero length")
        if math.prod(self.strides) != 4:
            raise ConfigError(f"total encoder stride must be 4, got {math.prod(self.strides)}")
        if not self.head and self.blocks[-1]:
            raise ConfigError("without a head the last stage must be a bare convolution")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _norm(c: int, enabled: bool) -> nn.Module:
    return nn.GroupNorm(min(8, c), c) if enabled else nn.Identity()


class BasicBlock(nn.Module):
    def __init__(self, c: int, norm: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=not norm)
        self.norm1 = _norm(c, norm)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=not norm)
        self.norm2 = _norm(c, norm)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(y)))


class Encoder(nn.Module):
    """Reduced ResNet-style encoder with total stride 4."""

    def __init__(self, config: EncoderConfig | None = None, in_channels: int = 3):
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        layers: list[nn.Module] = []
        c_in = in_channels
        last = len(cfg.widths) - 1
        for i, (w, n, s) in enumerate(zip(cfg.widths, cfg.blocks, cfg.strides)):
            if i == last and not cfg.head:
                layers.append(nn.Conv2d(c_in, w, 3, stride=s, padding=1))
            else:
                conv = nn.Conv2d(c_in, w, 3, stride=s, padding=1, bias=not cfg.norm)
                layers += [conv, _norm(w, cfg.norm), nn.ReLU()]
            layers += [BasicBlock(w, cfg.norm) for _ in range(n)]
            c_in = w
        if cfg.head:
            layers.append(nn.Conv2d(c_in, cfg.dim, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is not divisible by 4")
        return self.body(x)


@dataclass
class FeatureMap:
    values: torch.Tensor  # d x h x w

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) <= 0:
            raise ShapeError(f"feature map must be d x h x w, got {tuple(self.values.shape)}")

    @property
    def shape(self):
        return tuple(self.values.shape)


def frame_tensor(frame: Frame) -> torch.Tensor:
    """Network-scaled Lab tensor (3 x H x W) for a frame in either colour space."""
    lab = frame if frame.color_space == "Lab" else rgb_to_lab(frame)
    return torch.from_numpy(lab_to_network(lab.pixels))


def encode(frame: Frame, encoder: Encoder, grad: bool = False) -> FeatureMap:
    """Features at 1/4 resolution; runs the encoder in evaluation mode."""
    if frame.height % 4 or frame.width % 4:
        raise ShapeError(f"frame {frame.height}x{frame.width} is not divisible by 4")
    x = frame_tensor(frame)[None].to(next(encoder.parameters()).dtype)
    encoder.eval()
    with torch.set_grad_enabled(grad):
        f = encoder(x)[0]
    return FeatureMap(f)


# ------------------------------------------------------------------ affinity


def window_valid(h: int, w: int, side: int, device=None) -> torch.Tensor:
    """Boolean (side, side, h, w): which window offsets land inside the map."""
    r = side // 2
    off = torch.arange(side, device=device) - r
    ys = torch.arange(h, device=device)
    xs = torch.arange(w, device=device)
    vy = ((ys[None, :] + off[:, None]) >= 0) & ((ys[None, :] + off[:, None]) < h)  # (side, h)
    vx = ((xs[None, :] + off[:, None]) >= 0) & ((xs[None, :] + off[:, None]) < w)  # (side, w)
    return vy[:, None, :, None] & vx[None, :, None, :]


def window_index(h: int, w: int, side: int, device=None) -> torch.Tensor:
    """Flat reference index (hw, side * side) of every window offset, clamped at the border."""
    r = side // 2
    off = torch.arange(side, device=device) - r
    ys = (torch.arange(h, device=device)[None, :] + off[:, None]).clamp(0, h - 1)
    xs = (torch.arange(w, device=device)[None, :] + off[:, None]).clamp(0, w - 1)
    idx = ys[:, None, :, None] * w + xs[None, :, None, :]  # (side, side, h, w)
    return idx.permute(2, 3, 0, 1).reshape(h * w, side * side)


def _use_gather(h: int, w: int, side: int) -> bool:
    # all-pairs products are cheaper than strided windows while the map is small
    return h * w <= 4 * side * side


def window_logits(query: torch.Tensor, refs: torch.Tensor, side: int) -> torch.Tensor:
    """Dot products over local windows.

    query (B, d, h, w), refs (B, K, d, h, w) -> (B, K, side, side, h, w) where
    entry ``[b, k, a, c, y, x]`` is ``<q[y, x], ref_k[y + a - r, x + c - r]>``.
    Offsets that fall outside the map hold arbitrary values and must be masked
    by the caller.
    """
    b, k, d, h, w = refs.shape
    if _use_gather(h, w, side):
        allpairs = torch.einsum("bdn,bkdm->bknm", query.flatten(2), refs.flatten(3))
        idx = window_index(h, w, side, query.device)
        picked = torch.gather(allpairs, 3, idx[None, None].expand(b, k, -1, -1))
        return picked.view(b, k, h, w, side, side).permute(0, 1, 4, 5, 2, 3)
    r = side // 2
    padded = F.pad(refs.reshape(b * k, d, h, w), (r, r, r, r)).view(b, k, d, h + 2 * r, w + 2 * r)
    q = query[:, None, :, :, :, None]
    rows = []
    for a in range(side):
        strip = padded[:, :, :, a : a + h, :].unfold(-1, side, 1)  # (B, K, d, h, w, side)
        rows.append((q * strip).sum(2))  # (B, K, h, w, side)
    return torch.stack(rows, 2).permute(0, 1, 2, 5, 3, 4)


def masked_softmax(logits: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Softmax over (K, side, side) jointly, with invalid offsets excluded from the normaliser."""
    valid = valid.expand_as(logits)
    masked = logits.masked_fill(~valid, float("-inf"))
    peak = masked.amax(dim=(1, 2, 3), keepdim=True)
    e = torch.exp(masked - peak)
    return e / e.sum(dim=(1, 2, 3), keepdim=True)


def affinity_weights(query: torch.Tensor, refs: torch.Tensor, side: int) -> torch.Tensor:
    """Restricted attention weights (B, K, side, side, h, w); rows sum to one over valid entries."""
    if side % 2 == 0 or side < 1:
        raise ConfigError(f"window side must be odd and positive, got {side}")
    if query.ndim != 4 or refs.ndim != 5 or refs.shape[0] != query.shape[0] or refs.shape[2:] != query.shape[1:]:
        raise ShapeError(f"query {tuple(query.shape)} and references {tuple(refs.shape)} do not match")
    h, w = query.shape[-2:]
    valid = window_valid(h, w, side, query.device)
    return masked_softmax(window_logits(query, refs, side), valid)


def aggregate(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Weighted window sums: weights (B, K, s, s, h, w), values (B, K, C, h, w) -> (B, C, h, w)."""
    b, k, s, _, h, w = weights.shape
    if values.shape[:2] != (b, k) or values.shape[-2:] != (h, w):
        raise ShapeError(f"values {tuple(values.shape)} do not match affinity layout {tuple(weights.shape)}")
    c = values.shape[2]
    valid = window_valid(h, w, s, weights.device)
    # zero the excluded offsets explicitly so clamped gathers cannot leak
    weights = weights.masked_fill(~valid, 0.0)
    if _use_gather(h, w, s):
        idx = window_index(h, w, s, weights.device)
        picked = values.flatten(3)[..., idx]  # (B, K, C, hw, s*s)
        wt = weights.permute(0, 1, 4, 5, 2, 3).reshape(b, k, 1, h * w, s * s)
        return (picked * wt).sum(dim=(1, 4)).view(b, c, h, w)
    r = s // 2
    padded = F.pad(values.reshape(b * k, c, h, w), (r, r, r, r)).view(b, k, c, h + 2 * r, w + 2 * r)
    out = values.new_zeros(b, c, h, w)
    for a in range(s):
        strip = padded[:, :, :, a : a + h, :].unfold(-1, s, 1)  # (B, K, C, h, w, s)
        wa = weights[:, :, a].permute(0, 1, 3, 4, 2)[:, :, None]  # (B, K, 1, h, w, s)
        out = out + (wa * strip).sum(dim=(1, 5))
    return out


@dataclass
class Affinity:
    """Row-stochastic windowed attention from query pixels to K reference windows.

    ``weights`` has shape (K, side, side, h, w); entries for offsets outside the
    map are exactly zero and flagged False in ``valid``.
    """

    weights: torch.Tensor
    window_side: int

    @property
    def num_refs(self) -> int:
        return self.weights.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.weights.shape[-2:])

    @property
    def valid(self) -> torch.Tensor:
        h, w = self.spatial
        return window_valid(h, w, self.window_side, self.weights.device).expand_as(self.weights)

    def matrix(self) -> torch.Tensor:
        """(hw, K * side^2) with columns ordered (reference, dy, dx)."""
        k, s, _, h, w = self.weights.shape
        return self.weights.permute(3, 4, 0, 1, 2).reshape(h * w, k * s * s)

    def row_lengths(self) -> torch.Tensor:
        k, s, _, h, w = self.weights.shape
        return self.valid.permute(3, 4, 0, 1, 2).reshape(h * w, -1).sum(1)

    def to_dense(self) -> torch.Tensor:
        """(hw, K * hw) matrix over every reference pixel; zero outside the windows."""
        k, s, _, h, w = self.weights.shape
        r = s // 2
        dense = self.weights.new_zeros(h * w, k, h * w)
        valid = self.valid
        for kk in range(k):
            for a in range(s):
                for c in range(s):
                    ys, xs = torch.nonzero(valid[kk, a, c], as_tuple=True)
                    rows = ys * w + xs
                    cols = (ys + a - r) * w + (xs + c - r)
                    dense[rows, kk, cols] = self.weights[kk, a, c, ys, xs]
        return dense.reshape(h * w, k * h * w)


def restricted_affinity(query: FeatureMap, refs: list[FeatureMap], window_side: int) -> Affinity:
    if not refs:
        raise ShapeError("at least one reference feature map is required")
    shapes = {r.shape for r in refs}
    if len(shapes) != 1 or query.shape not in shapes:
        raise ShapeError(f"feature shapes differ: query {query.shape}, references {sorted(shapes)}")
    stacked = torch.stack([r.values for r in refs])[None]
    weights = affinity_weights(query.values[None], stacked, window_side)
    return Affinity(weights[0], window_side)


def downsample(pixels: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Average pooling by ``factor`` over the trailing two axes."""
    shape = pixels.shape
    flat = pixels.reshape(-1, 1, *shape[-2:])
    out = F.avg_pool2d(flat, factor)
    return out.reshape(*shape[:-2], *out.shape[-2:])


def reconstruct(affinity: Affinity, refs: list[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Per-channel weighted sums of reference values (each C x h x w at feature resolution)."""
    values = torch.stack(list(refs)) if not isinstance(refs, torch.Tensor) else refs
    if values.ndim != 4 or values.shape[0] != affinity.num_refs:
        raise ShapeError(f"expected {affinity.num_refs} reference maps, got {tuple(values.shape)}")
    return aggregate(affinity.weights[None], values[None].to(affinity.weights.dtype))[0]


def photometric_loss(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber loss with transition point ``delta``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    r = (pred - target).abs()
    return torch.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta)).mean()


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    iterations: int = 120_000
    batch_size: int = 48
    lr: float = 1e-3
    crop: int = 384
    window_side: int = 25
    max_gap: int = 4
    log_every: int = 100
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)


@dataclass
class TrainResult:
    encoder: Encoder
    losses: list[float]
    log: list[tuple[int, float, float]]


def lab_corpus(corpus: list[Sequence]) -> list[list[Frame]]:
    """Convert every frame once up front; training samples crops from these."""
    return [[f if f.color_space == "Lab" else rgb_to_lab(f) for f in seq.frames] for seq in corpus]


def prepare_clip(
    frames: list[Frame], crop: int, rng: np.random.Generator, bottleneck: BottleneckConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Shared random crop for a clip; returns (network inputs, clean targets at 1/4 resolution)."""
    box = sample_crop_box(frames[0].height, frames[0].width, crop, rng)
    clean = [crop_resize(f, box, crop) for f in frames]
    noisy = [apply_bottleneck(f, bottleneck, rng) for f in clean]
    x = torch.from_numpy(np.stack([lab_to_network(f.pixels) for f in noisy]))
    target = downsample(torch.from_numpy(np.stack([lab_to_network(f.pixels) for f in clean])))
    return x, target


def check_finite(loss: torch.Tensor, iteration: int, batch_ids) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at iteration {iteration}, batch {batch_ids}")


def smoothed(values: list[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def train_pairwise(
    corpus: list[Sequence], cfg: TrainConfig, encoder: Encoder | None = None, callback=None
) -> TrainResult:
    """Pairwise reconstruction training: rebuild frame t from frame t - gap."""
    if any(len(s) < 2 for s in corpus):
        raise ShapeError("every training sequence needs at least two frames")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder = encoder or Encoder(cfg.encoder)
    if cfg.iterations == 0:
        return TrainResult(encoder, [], [])
    frames = lab_corpus(corpus)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    encoder.train()
    losses, records = [], []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        xs, ts, ids = [], [], []
        for _ in range(cfg.batch_size):
            si = int(rng.integers(len(frames)))
            seq = frames[si]
            gap = int(rng.integers(1, min(cfg.max_gap, len(seq) - 1) + 1))
            t = int(rng.integers(gap, len(seq)))
            x, target = prepare_clip([seq[t - gap], seq[t]], cfg.crop, rng, cfg.bottleneck)
            xs.append(x)
            ts.append(target)
            ids.append((corpus[si].name, t - gap, t))
        x = torch.stack(xs)  # (B, 2, 3, H, W)
        target = torch.stack(ts)  # (B, 2, 3, h, w)
        b = x.shape[0]
        feats = encoder(x.flatten(0, 1)).unflatten(0, (b, 2))
        weights = affinity_weights(feats[:, 1], feats[:, :1], cfg.window_side)
        pred = aggregate(weights, target[:, :1])
        loss = photometric_loss(pred, target[:, 1])
        check_finite(loss, it, ids)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            records.append((it + 1, losses[-1], time.perf_counter() - start))
            log.info("pairwise iter %d loss %.5f", it + 1, losses[-1])
        if callback is not None:
            callback(it, encoder, loss.item())
    encoder.eval()
    return TrainResult(encoder, losses, records)


def format_log(records: list[tuple[int, float, float]]) -> str:
    return "".join(f"{i}\t{loss:.6f}\t{sec:.3f}\n" for i, loss, sec in records)
