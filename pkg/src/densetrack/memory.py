"""Momentum dual encoders, the K-frame memory bank and memory-stage finetuning."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn as nn

from .correspond import (
    BottleneckConfig,
    Encoder,
    affinity_weights,
    aggregate,
    check_finite,
    lab_corpus,
    photometric_loss,
    prepare_clip,
)
from .errors import ConfigError, OrderingError, ShapeError
from .ingest import Sequence

log = logging.getLogger(__name__)

BankPolicy = Literal["first_plus_recent", "full_history", "previous_only"]


@dataclass
class MomentumPair:
    """Query encoder (trained by gradients) and reference encoder (moving average of it)."""

    theta_q: nn.Module
    theta_r: nn.Module
    m: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.m}")
        q = {k: v.shape for k, v in self.theta_q.state_dict().items()}
        r = {k: v.shape for k, v in self.theta_r.state_dict().items()}
        if q != r:
            raise ShapeError("query and reference encoders have different architectures")

    @classmethod
    def from_encoder(cls, encoder: nn.Module, m: float = 0.999) -> "MomentumPair":
        """Both branches start as copies of ``encoder``."""
        return cls(encoder, copy.deepcopy(encoder), m)


@torch.no_grad()
def momentum_update(pair: MomentumPair) -> MomentumPair:
    """theta_r <- m * theta_r + (1 - m) * theta_q, in place; theta_q is untouched."""
    q_params = dict(pair.theta_q.named_parameters())
    r_params = dict(pair.theta_r.named_parameters())
    if q_params.keys() != r_params.keys():
        raise ShapeError("query and reference encoders have different parameter names")
    for name, r in r_params.items():
        q = q_params[name]
        if q.shape != r.shape:
            raise ShapeError(f"parameter {name}: {tuple(q.shape)} vs {tuple(r.shape)}")
        r.mul_(pair.m).add_(q, alpha=1.0 - pair.m)
    for (name, rb), qb in zip(pair.theta_r.named_buffers(), pair.theta_q.buffers()):
        rb.copy_(qb)
    return pair


# ---------------------------------------------------------------------- bank


@dataclass
class BankEntry:
    index: int
    features: torch.Tensor  # d x h x w, from the reference encoder
    image: torch.Tensor  # C x h x w at feature resolution
    mask: torch.Tensor  # (M+1) x h x w at feature resolution


@dataclass
class MemoryBank:
    capacity: int = 5
    entries: list[BankEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("memory capacity K must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]


def bank_update(bank: MemoryBank, entry: BankEntry, policy: BankPolicy = "first_plus_recent") -> MemoryBank:
    """Insert ``entry`` and evict according to ``policy``.

    ``first_plus_recent`` keeps frame 0 plus the K - 1 most recent frames,
    ``full_history`` never evicts, and ``previous_only`` keeps just the newest
    frame (the pairwise baseline; the only policy that drops frame 0).
    """
    if bank.entries:
        if entry.index in bank.indices:
            raise OrderingError(f"frame {entry.index} is already in the memory bank")
        if entry.index < max(bank.indices):
            raise OrderingError(f"frame {entry.index} is older than the newest bank entry")
    entries = bank.entries + [entry]
    if policy == "first_plus_recent":
        pinned = [e for e in entries if e.index == 0]
        rest = [e for e in entries if e.index != 0]
        keep = bank.capacity - len(pinned)
        entries = pinned + (rest[-keep:] if keep > 0 else [])
    elif policy == "previous_only":
        entries = entries[-1:]
    elif policy != "full_history":
        raise ConfigError(f"unknown bank policy {policy!r}")
    bank.entries = entries
    return bank


# ------------------------------------------------------------------ finetune


@dataclass
class MemoryConfig:
    iterations: int = 10_000
    batch_size: int = 4
    lr: float = 1e-4
    momentum: float = 0.999
    num_refs: int = 5
    crop: int = 384
    window_side: int = 25
    log_every: int = 100
    seed: int = 0
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)


@dataclass
class FinetuneResult:
    pair: MomentumPair
    losses: list[float]
    log: list[tuple[int, float, float]]


def sample_memory_clip(length: int, num_refs: int, rng: np.random.Generator) -> tuple[list[int], int]:
    """Reference indices (first frame plus a contiguous run just before the query) and the query index."""
    recent = min(num_refs - 1, length - 2)
    t = int(rng.integers(recent + 1, length))
    return [0] + [i for i in range(t - recent, t) if i != 0], t


def finetune_with_memory(
    init: Encoder, corpus: list[Sequence], cfg: MemoryConfig, callback=None
) -> FinetuneResult:
    """Multi-reference reconstruction: query encoder by Adam, reference encoder by momentum."""
    if any(len(s) < 2 for s in corpus):
        raise ShapeError("every training sequence needs at least two frames")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pair = MomentumPair(copy.deepcopy(init), copy.deepcopy(init), cfg.momentum)
    if cfg.iterations == 0:
        return FinetuneResult(pair, [], [])
    for p in pair.theta_r.parameters():
        p.requires_grad_(False)
    frames = lab_corpus(corpus)
    opt = torch.optim.Adam(pair.theta_q.parameters(), lr=cfg.lr)
    pair.theta_q.train()
    pair.theta_r.train()
    losses, records = [], []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        queries, refs, targets, ref_targets, ids = [], [], [], [], []
        si = int(rng.integers(len(frames)))
        seq = frames[si]
        ref_idx, t = sample_memory_clip(len(seq), cfg.num_refs, rng)
        for _ in range(cfg.batch_size):
            x, target = prepare_clip([seq[i] for i in ref_idx] + [seq[t]], cfg.crop, rng, cfg.bottleneck)
            refs.append(x[:-1])
            queries.append(x[-1])
            ref_targets.append(target[:-1])
            targets.append(target[-1])
        ids = (corpus[si].name, ref_idx, t)
        b, k = len(queries), len(ref_idx)
        with torch.no_grad():
            f_r = pair.theta_r(torch.cat(refs)).unflatten(0, (b, k))
        f_q = pair.theta_q(torch.stack(queries))
        weights = affinity_weights(f_q, f_r, cfg.window_side)
        pred = aggregate(weights, torch.stack(ref_targets))
        loss = photometric_loss(pred, torch.stack(targets))
        check_finite(loss, it, ids)
        opt.zero_grad()
        loss.backward()
        opt.step()
        momentum_update(pair)
        losses.append(loss.item())
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            records.append((it + 1, losses[-1], time.perf_counter() - start))
            log.info("memory iter %d loss %.5f", it + 1, losses[-1])
        if callback is not None:
            callback(it, pair, loss.item())
    for p in pair.theta_r.parameters():
        p.requires_grad_(True)
    pair.theta_q.eval()
    pair.theta_r.eval()
    return FinetuneResult(pair, losses, records)
