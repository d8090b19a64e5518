"""Per-video online adaptation: a from-scratch U-Net fitted to propagated pseudo-masks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .correspond import BasicBlock, _norm, check_finite
from .errors import ConfigError, ShapeError
from .ingest import Frame, MaskProbMap, lab_to_rgb, resize_array
from .metrics import region_similarity
from .track import renormalize, upsample_probs

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    iterations: int = 200
    lr: float = 2e-4
    lr_step: int = 50
    lr_gamma: float = 0.5
    resolution: int = 480
    batch_size: int = 4
    jitter: bool = True
    grayscale: bool = True
    flip: bool = True
    w_ce: float = 1.0
    w_dice: float = 1.0
    decay: float = 0.98
    widths: tuple[int, ...] = (64, 128, 256)
    blocks: tuple[int, ...] = (2, 2, 2)
    strides: tuple[int, ...] = (2, 2, 1)
    seed: int = 0
    curve_every: int = 10

    def __post_init__(self):
        self.widths, self.blocks, self.strides = tuple(self.widths), tuple(self.blocks), tuple(self.strides)
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.w_ce < 0 or self.w_dice < 0 or self.w_ce + self.w_dice <= 0:
            raise ConfigError("loss weights must be >= 0 with at least one positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("frame-weight decay must lie in (0, 1]")
        if self.resolution % 4:
            raise ConfigError("adaptation resolution must be divisible by 4")


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False), _norm(c_out, True), nn.ReLU())


class AppearanceNet(nn.Module):
    """Encoder-decoder with skip connections and nearest-neighbour upsampling."""

    def __init__(self, num_classes: int, widths=(64, 128, 256), blocks=(2, 2, 2), strides=(2, 2, 1)):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("the appearance model needs background plus at least one object")
        self.num_classes = num_classes
        stem = max(widths[0] // 2, 8)
        self.stem = _conv_block(3, stem)
        self.stages = nn.ModuleList()
        c_in = stem
        for w, n, s in zip(widths, blocks, strides):
            self.stages.append(nn.Sequential(_conv_block(c_in, w, s), *[BasicBlock(w, True) for _ in range(n)]))
            c_in = w
        skips = [stem] + list(widths[:-1])
        self.decoder = nn.ModuleList()
        for skip in reversed(skips):
            self.decoder.append(_conv_block(c_in + skip, skip))
            c_in = skip
        self.head = nn.Conv2d(c_in, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        y = feats.pop()
        for block, skip in zip(self.decoder, reversed(feats)):
            y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
            y = block(torch.cat([y, skip], 1))
        return self.head(y)


# ------------------------------------------------------------------------ loss


def frame_weights(num_frames: int, decay: float) -> np.ndarray:
    """``decay ** k`` rescaled to mean one, so early frames count more."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    raw = decay ** np.arange(num_frames, dtype=np.float64)
    return raw / raw.mean()


def harden(probs: torch.Tensor) -> torch.Tensor:
    """One-hot of the per-pixel argmax over the channel axis (axis 1)."""
    return F.one_hot(probs.argmax(1), probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)


def combined_loss(
    pred: torch.Tensor,
    pseudo: torch.Tensor,
    frame_weight: torch.Tensor | float = 1.0,
    w_ce: float = 1.0,
    w_dice: float = 1.0,
    eps: float = 1.0,
    from_logits: bool = False,
) -> torch.Tensor:
    """Frame-weighted cross-entropy plus soft Dice against hardened pseudo-masks.

    ``pred`` and ``pseudo`` are (B, C, H, W) or (C, H, W); ``pred`` holds
    probabilities unless ``from_logits``. Returns the batch mean.
    """
    if pred.ndim == 3:
        pred, pseudo = pred[None], pseudo[None]
    if pred.shape != pseudo.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs pseudo-mask {tuple(pseudo.shape)}")
    target = harden(pseudo)
    if from_logits:
        log_p = F.log_softmax(pred, 1)
        p = log_p.exp()
    else:
        p = pred
        log_p = torch.log(pred.clamp_min(1e-12))
    ce = -(target * log_p).sum(1).mean(dim=(1, 2))
    inter = (p * target).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + target.sum(dim=(2, 3))
    dice = ((2 * inter + eps) / (denom + eps)).mean(1)
    per_frame = w_ce * ce + w_dice * (1 - dice)
    weight = torch.as_tensor(frame_weight, dtype=per_frame.dtype)
    return (weight * per_frame).mean()


# -------------------------------------------------------------------- training


@dataclass
class AdaptResult:
    model: AppearanceNet
    losses: list[float]
    # (iteration, loss, J vs pseudo-masks, J vs oracle or nan)
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)


def _rgb(frame: Frame) -> np.ndarray:
    return (frame if frame.color_space == "RGB" else lab_to_rgb(frame)).pixels


def _network_input(rgb: torch.Tensor) -> torch.Tensor:
    return (rgb - 0.5) / 0.25


def _augment(x: torch.Tensor, y: torch.Tensor, cfg: AdaptConfig, rng: np.random.Generator):
    """Joint flips; colour jitter and gray-scaling touch the image only. x, y are (C, H, W)."""
    flip = rng.uniform() < 0.5
    jitter = rng.uniform() < 0.5
    gain, shift = rng.uniform(0.8, 1.2, size=3), rng.uniform(-0.1, 0.1, size=3)
    gray = rng.uniform() < 0.1
    if cfg.flip and flip:
        x, y = x.flip(-1), y.flip(-1)
    if cfg.jitter and jitter:
        x = (x * x.new_tensor(gain).view(3, 1, 1) + x.new_tensor(shift).view(3, 1, 1)).clamp(0, 1)
    if cfg.grayscale and gray:
        x = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).expand(3, -1, -1)
    return x, y


def _predict_batch(model: AppearanceNet, x: torch.Tensor, chunk: int = 8) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([F.softmax(model(_network_input(x[i : i + chunk])), 1) for i in range(0, len(x), chunk)])


def _mean_j(pred_labels: np.ndarray, ref_labels: np.ndarray, num_classes: int) -> float:
    scores = []
    for k in range(len(pred_labels)):
        for obj in range(1, num_classes):
            scores.append(region_similarity(pred_labels[k] == obj, ref_labels[k] == obj))
    return float(np.mean(scores)) if scores else float("nan")


def train_appearance(
    frames: list[Frame],
    pseudo_masks: list[MaskProbMap],
    cfg: AdaptConfig,
    oracle_masks: list[MaskProbMap] | None = None,
    curve_frames: list[int] | None = None,
) -> AdaptResult:
    """Fit a fresh appearance model to ``(frame, pseudo-mask)`` pairs for ``cfg.iterations`` steps.

    ``pseudo_masks[0]`` is expected to be the ground-truth annotation.
    ``oracle_masks`` are only used for the monitoring curve, never for training.
    """
    if not frames or len(frames) != len(pseudo_masks):
        raise ShapeError("need equal-length, non-empty frame and pseudo-mask lists")
    num_classes = pseudo_masks[0].num_classes
    if any(m.num_classes != num_classes for m in pseudo_masks):
        raise ShapeError("pseudo-masks disagree on the number of classes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = AppearanceNet(num_classes, cfg.widths, cfg.blocks, cfg.strides)
    res = cfg.resolution

    images = torch.from_numpy(np.stack([resize_array(_rgb(f), res, res) for f in frames]))
    targets = harden(torch.from_numpy(np.stack([renormalize(resize_array(m.probs, res, res)) for m in pseudo_masks])))
    if all(int(t.argmax(0).max()) == 0 for t in targets):
        warnings.warn("every pseudo-mask is background only; the target is degenerate", RuntimeWarning)
    weights = torch.from_numpy(frame_weights(len(frames), cfg.decay)).float()

    watch = curve_frames if curve_frames is not None else list(range(1, len(frames))) or [0]
    pseudo_labels = targets[watch].argmax(1).numpy()
    oracle_labels = None
    if oracle_masks is not None:
        oracle_labels = np.stack([
            renormalize(resize_array(oracle_masks[k].probs, res, res)).argmax(0) for k in watch
        ])

    def monitor(it: int, loss: float) -> None:
        labels = _predict_batch(model, images[watch]).argmax(1).numpy()
        j_pseudo = _mean_j(labels, pseudo_labels, num_classes)
        j_oracle = _mean_j(labels, oracle_labels, num_classes) if oracle_labels is not None else float("nan")
        curve.append((it, loss, j_pseudo, j_oracle))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step, cfg.lr_gamma)
    losses: list[float] = []
    curve: list[tuple[int, float, float, float]] = []
    if cfg.curve_every and cfg.iterations:
        monitor(0, float("nan"))
    for it in range(cfg.iterations):
        model.train()
        idx = rng.integers(0, len(frames), size=cfg.batch_size)
        pairs = [_augment(images[i], targets[i], cfg, rng) for i in idx]
        x = torch.stack([p[0] for p in pairs])
        y = torch.stack([p[1] for p in pairs])
        logits = model(_network_input(x))
        loss = combined_loss(logits, y, weights[idx], cfg.w_ce, cfg.w_dice, from_logits=True)
        check_finite(loss, it, idx.tolist())
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if cfg.curve_every and ((it + 1) % cfg.curve_every == 0 or it + 1 == cfg.iterations):
            monitor(it + 1, losses[-1])
    model.eval()
    return AdaptResult(model, losses, curve)


def predict_appearance(model: AppearanceNet, frame: Frame, resolution: int | None = None) -> MaskProbMap:
    """Full-resolution class probabilities for one frame."""
    rgb = _rgb(frame)
    h, w = rgb.shape[1:]
    res = resolution or max(4, (min(h, w) // 4) * 4)
    x = torch.from_numpy(resize_array(rgb, res, res))[None]
    if x.shape[1] != 3:
        raise ShapeError("appearance model expects 3-channel frames")
    probs = _predict_batch(model, x)[0].numpy()
    return MaskProbMap(upsample_probs(probs, h, w), "full")


def format_curve(curve: list[tuple[int, float, float, float]]) -> str:
    return "".join(f"{i}\t{loss:.6f}\t{jp:.6f}\t{jo:.6f}\n" for i, loss, jp, jo in curve)


def inject_drift(
    masks: list[MaskProbMap], center: tuple[float, float], radius: float, start: int = 5, label: int = 1
) -> list[MaskProbMap]:
    """Paint a spurious disk of ``label`` into every mask from frame ``start`` on.

    Emulates the error accumulation of long propagation chains; used to
    probe whether adaptation can clean up its own training targets.
    """
    out = []
    for k, m in enumerate(masks):
        if k < start:
            out.append(m)
            continue
        labels = m.labels()
        h, w = labels.shape
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = center
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = label
        out.append(MaskProbMap.from_labels(labels, m.num_classes - 1, m.resolution_tag))
    return out
