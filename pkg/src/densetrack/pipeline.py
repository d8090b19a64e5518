"""Glue shared by the command line and the estimator facade."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import adapt as adapt_mod
from .config import PipelineConfig
from .errors import LoadError
from .ingest import MaskProbMap, Sequence, load_sequence, save_palette_png
from .memory import MomentumPair
from .metrics import EvalReport, evaluate_arrays
from .synthgen import occlusion_corpus, random_corpus, translation_corpus
from .track import hard_labels, run_tracking

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ corpora


def simulate_corpus(cfg: PipelineConfig) -> list[Sequence]:
    s = cfg.simulate
    if s.kind == "translation":
        return translation_corpus(s.count, cfg.seed, s.frame_size, s.length)
    if s.kind == "occlusion":
        return occlusion_corpus(s.count, cfg.seed, s.frame_size, max(s.length, 17))
    return random_corpus(s.count, cfg.seed, s.frame_size, s.length)


def discover_corpus(root: str | Path, require_masks: bool = False) -> list[Sequence]:
    """Load every sequence under ``root``.

    Accepts a DAVIS/YouTube-VOS root (``JPEGImages/`` + ``Annotations/``), a
    directory of flat sequences (``<seq>/frames`` with optional
    ``<seq>/masks``) or a single flat sequence directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"corpus directory {root} does not exist")
    if (root / "JPEGImages").is_dir():
        names = sorted(p.name for p in (root / "JPEGImages").iterdir() if p.is_dir())
        seqs = [load_sequence(root, "davis", n) for n in names]
    else:
        dirs = [root] if (root / "frames").is_dir() else sorted(p for p in root.iterdir() if (p / "frames").is_dir())
        seqs = []
        for d in dirs:
            masks = d / "masks"
            seq = load_sequence(d / "frames", "flat", d.name, masks if masks.is_dir() else None)
            seqs.append(seq)
    if not seqs:
        raise LoadError(f"no sequences found under {root}")
    if require_masks:
        bare = [s.name for s in seqs if s.first_mask is None]
        if bare:
            raise LoadError(f"sequences without a first-frame annotation: {bare}")
    return seqs


def ground_truth(seq: Sequence) -> list[np.ndarray | None]:
    return [None if m is None else m.labels() for m in (seq.masks or [None] * len(seq))]


def has_evaluation_targets(seq: Sequence) -> bool:
    return seq.masks is not None and any(m is not None for m in seq.masks[1:])


# ----------------------------------------------------------------- tracking


@dataclass
class TrackOutput:
    name: str
    stems: list[str]
    probs: list[MaskProbMap]
    labels: list[np.ndarray]
    curve: list[tuple[int, float, float, float]] | None = None


def track_video(
    seq: Sequence,
    pair: MomentumPair,
    cfg: PipelineConfig,
    adapt: bool = False,
    k: int | None = None,
    policy: str | None = None,
) -> TrackOutput:
    """Propagate the first-frame mask through ``seq``; optionally refine with online adaptation."""
    torch.manual_seed(cfg.seed)
    k = cfg.track.k if k is None else k
    policy = policy or cfg.track.policy
    probs = run_tracking(seq, pair, k, cfg.track.window, policy, cfg.track.short_side)
    drift = cfg.adapt.drift
    if drift:
        probs = adapt_mod.inject_drift(probs, tuple(drift["center"]), drift["radius"], drift.get("start", 5))
    curve = None
    if adapt and len(seq) > 1:
        acfg = cfg.adapt_config()
        oracle = seq.masks if seq.masks is not None and all(m is not None for m in seq.masks) else None
        result = adapt_mod.train_appearance(seq.frames, probs, acfg, oracle_masks=oracle)
        refined = [probs[0]] + [
            adapt_mod.predict_appearance(result.model, f, acfg.resolution) for f in seq.frames[1:]
        ]
        probs, curve = refined, result.curve
    return TrackOutput(seq.name, list(seq.stems), probs, hard_labels(probs), curve)


def _track_job(seq, pair, cfg_dict, adapt, k, policy, threads):
    if threads:
        torch.set_num_threads(threads)
    return track_video(seq, pair, PipelineConfig.from_dict(cfg_dict), adapt, k, policy)


def track_corpus(
    seqs: list[Sequence],
    pair: MomentumPair,
    cfg: PipelineConfig,
    adapt: bool = False,
    k: int | None = None,
    policy: str | None = None,
) -> list[TrackOutput]:
    """Track every sequence, spreading videos over up to ``cfg.jobs`` worker processes."""
    if cfg.jobs == 1 or len(seqs) == 1:
        return [track_video(s, pair, cfg, adapt, k, policy) for s in seqs]
    from joblib import Parallel, delayed

    threads = max(1, torch.get_num_threads() // cfg.jobs)
    return Parallel(n_jobs=min(cfg.jobs, len(seqs)), backend="loky")(
        delayed(_track_job)(s, pair, cfg.to_dict(), adapt, k, policy, threads) for s in seqs
    )


def write_outputs(outputs: list[TrackOutput], out_dir: str | Path) -> None:
    out = Path(out_dir)
    for o in outputs:
        for stem, labels in zip(o.stems, o.labels):
            save_palette_png(labels, out / o.name / f"{stem}.png")
        if o.curve is not None:
            path = out / "curves" / f"{o.name}.tsv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(adapt_mod.format_curve(o.curve))


def score_outputs(outputs: list[TrackOutput], seqs: list[Sequence], split_tags=None) -> EvalReport:
    gts = {s.name: ground_truth(s) for s in seqs if has_evaluation_targets(s)}
    preds = {o.name: list(o.labels) for o in outputs if o.name in gts}
    return evaluate_arrays(preds, gts, split_tags)


# ----------------------------------------------------------------- ablation

# (row label, which checkpoint, bank policy, K or None for the configured K, adapt)
LADDER = [
    ("pairwise", "pairwise", "previous_only", 1, False),
    ("+memory", "memory", "first_plus_recent", None, False),
    ("+adaptation", "memory", "first_plus_recent", None, True),
]
SWEEP = [
    ("K=1", "previous_only", 1),
    ("K=3", "first_plus_recent", 3),
    ("K=5", "first_plus_recent", 5),
    ("K=full", "full_history", 1),
]


@dataclass
class AblationRow:
    group: str
    label: str
    summary: dict[str, float]


def run_ablation(
    seqs: list[Sequence],
    pairwise: MomentumPair,
    memory: MomentumPair,
    cfg: PipelineConfig,
) -> list[AblationRow]:
    """Module ladder plus reference-count sweep on one corpus.

    Identical settings are tracked once and reused across the two tables.
    """
    cache: dict[tuple, EvalReport] = {}

    def run(which: str, policy: str, k: int, adapt: bool) -> dict[str, float]:
        key = (which, policy, k, adapt)
        if key not in cache:
            pair = pairwise if which == "pairwise" else memory
            outputs = track_corpus(seqs, pair, cfg, adapt, k, policy)
            cache[key] = score_outputs(outputs, seqs)
            log.info("ablation %s: J&F %.3f", key, cache[key].summary["JF_mean"])
        return cache[key].summary

    rows = []
    for label, which, policy, k, adapt in LADDER:
        rows.append(AblationRow("modules", label, run(which, policy, k or cfg.track.k, adapt)))
    for label, policy, k in SWEEP:
        rows.append(AblationRow("references", label, run("memory", policy, k, False)))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    head = f"{'Variant':<16}{'J&F':>8}{'J(Mean)':>10}{'F(Mean)':>10}"
    lines = []
    for group in dict.fromkeys(r.group for r in rows):
        lines += [f"[{group}]", head, "-" * len(head)]
        for r in (r for r in rows if r.group == group):
            s = r.summary
            lines.append(f"{r.label:<16}{s['JF_mean'] * 100:8.1f}{s['J_mean'] * 100:10.1f}{s['F_mean'] * 100:10.1f}")
        lines.append("")
    return "\n".join(lines)
