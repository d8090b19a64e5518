"""Mask propagation through the memory bank, one frame at a time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .correspond import affinity_weights, aggregate, downsample, frame_tensor
from .errors import DenseTrackError, SessionError, ShapeError
from .ingest import Frame, MaskProbMap, Sequence, pad_to_multiple, resize_array
from .memory import BankEntry, BankPolicy, MemoryBank, MomentumPair, bank_update


@dataclass
class TrackSession:
    pair: MomentumPair
    bank: MemoryBank
    window_side: int = 25
    policy: BankPolicy = "first_plus_recent"
    feature_shape: tuple[int, int] | None = None
    outputs: list[MaskProbMap] = field(default_factory=list)
    next_index: int = 0


def _encode(encoder, x: torch.Tensor) -> torch.Tensor:
    encoder.eval()
    with torch.no_grad():
        return encoder(x[None].to(next(encoder.parameters()).dtype))[0]


def _to_network_input(frame: Frame) -> torch.Tensor:
    x = frame_tensor(frame)
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ShapeError(f"frame {tuple(x.shape[-2:])} is not divisible by 4; preprocess it first")
    return x


def start_session(
    pair: MomentumPair,
    frame: Frame,
    mask: MaskProbMap,
    capacity: int = 5,
    window_side: int = 25,
    policy: BankPolicy = "first_plus_recent",
) -> TrackSession:
    """Seed a session with the annotated first frame (mask at the frame's resolution)."""
    x = _to_network_input(frame)
    if mask.probs.shape[1:] != x.shape[1:]:
        raise ShapeError(f"mask {mask.probs.shape[1:]} does not match frame {tuple(x.shape[1:])}")
    feats = _encode(pair.theta_r, x)
    probs = downsample(torch.from_numpy(mask.probs)).to(feats.dtype)
    session = TrackSession(pair, MemoryBank(capacity), window_side, policy, tuple(feats.shape[-2:]))
    bank_update(session.bank, BankEntry(0, feats, downsample(x).to(feats.dtype), probs), policy)
    session.outputs.append(mask)
    session.next_index = 1
    return session


def propagate_step(session: TrackSession, frame: Frame) -> MaskProbMap:
    """Propagate the bank's masks onto ``frame``; returns probabilities at feature resolution."""
    if not session.bank.entries:
        raise SessionError("memory bank is empty; start the session with an annotated frame")
    x = _to_network_input(frame)
    pair = session.pair
    f_q = _encode(pair.theta_q, x)
    if tuple(f_q.shape[-2:]) != session.feature_shape:
        raise ShapeError(f"frame features {tuple(f_q.shape[-2:])} vs session {session.feature_shape}")
    entries = session.bank.entries
    refs = torch.stack([e.features for e in entries])[None]
    masks = torch.stack([e.mask for e in entries])[None]
    with torch.no_grad():
        weights = affinity_weights(f_q[None], refs, session.window_side)
        probs = aggregate(weights, masks)[0]
    f_r = f_q if pair.theta_r is pair.theta_q else _encode(pair.theta_r, x)
    entry = BankEntry(session.next_index, f_r, downsample(x).to(f_r.dtype), probs)
    bank_update(session.bank, entry, session.policy)
    session.next_index += 1
    out = MaskProbMap(probs.float().numpy(), "feature")
    session.outputs.append(out)
    return out


def renormalize(probs: np.ndarray) -> np.ndarray:
    probs = np.clip(probs, 0.0, None)
    total = probs.sum(axis=0, keepdims=True)
    return (probs / np.where(total > 0, total, 1.0)).astype(np.float32)


def upsample_probs(probs: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(probs, dtype=np.float32))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0].numpy()
    return renormalize(out)


def preprocess(frame: Frame, short_side: int | None) -> Frame:
    """Resize so the short side is ``short_side`` (if given), then edge-pad to multiples of 4."""
    pixels = frame.pixels
    if short_side:
        h, w = pixels.shape[1:]
        scale = short_side / min(h, w)
        pixels = resize_array(pixels, int(round(h * scale)), int(round(w * scale)))
    return Frame(pad_to_multiple(pixels, 4), frame.color_space, frame.index)


def _prepare_mask(mask: MaskProbMap, shape: tuple[int, int], short_side: int | None) -> MaskProbMap:
    probs = mask.probs
    if short_side:
        probs = renormalize(resize_array(probs, *shape))
    return MaskProbMap(pad_to_multiple(probs, 4), mask.resolution_tag)


def run_tracking(
    sequence: Sequence,
    pair: MomentumPair,
    K: int = 5,
    window_side: int = 25,
    policy: BankPolicy = "first_plus_recent",
    short_side: int | None = None,
) -> list[MaskProbMap]:
    """Full-resolution probability maps for every frame; frame 0 is the annotation itself."""
    first = sequence.first_mask
    if first is None:
        raise SessionError(f"{sequence.name!r} has no first-frame annotation")
    h, w = sequence.frames[0].height, sequence.frames[0].width
    f0 = preprocess(sequence.frames[0], short_side)
    scaled = (f0.height, f0.width)
    if short_side:
        scale = short_side / min(h, w)
        scaled = (int(round(h * scale)), int(round(w * scale)))
    session = start_session(pair, f0, _prepare_mask(first, scaled, short_side), K, window_side, policy)
    outputs = [first]
    for frame in sequence.frames[1:]:
        try:
            feat_probs = propagate_step(session, preprocess(frame, short_side))
        except DenseTrackError as exc:
            raise type(exc)(f"frame {frame.index}: {exc}") from exc
        full = upsample_probs(feat_probs.probs, f0.height, f0.width)[:, : scaled[0], : scaled[1]]
        if short_side:
            full = upsample_probs(full, h, w)
        outputs.append(MaskProbMap(renormalize(full), "full"))
    return outputs


def hard_labels(masks: list[MaskProbMap]) -> list[np.ndarray]:
    return [m.labels() for m in masks]
