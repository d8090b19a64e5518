"""Semi-supervised VOS evaluation: region similarity J and contour accuracy F."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CoverageError, ShapeError
from .ingest import read_palette_png

BOUNDARY_FRACTION = 0.008
RECALL_THRESHOLD = 0.5

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _check(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour (inside the image) in the background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=1)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= radius**2


def default_tolerance(shape: tuple[int, int]) -> int:
    return int(math.ceil(BOUNDARY_FRACTION * math.hypot(*shape)))


def contour_accuracy(pred, gt, tolerance: float | None = None) -> float:
    """Boundary F-measure; boundary pixels match when a counterpart lies within ``tolerance`` pixels."""
    pred, gt = _check(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(pred.shape)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pb, gb = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    se = disk(tolerance)
    gt_zone = ndimage.binary_dilation(gb, se)
    pred_zone = ndimage.binary_dilation(pb, se)
    precision = np.count_nonzero(pb & gt_zone) / n_p
    recall = np.count_nonzero(gb & pred_zone) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# -------------------------------------------------------------------- reports


@dataclass
class ObjectRecord:
    sequence: str
    object_id: int
    J_mean: float
    F_mean: float
    J_frames: list[float]
    F_frames: list[float]
    tag: str | None = None


@dataclass
class EvalReport:
    records: list[ObjectRecord] = field(default_factory=list)

    @staticmethod
    def _summary(records: list[ObjectRecord]) -> dict[str, float]:
        if not records:
            return {"J_mean": float("nan"), "J_recall": float("nan"), "F_mean": float("nan"),
                    "F_recall": float("nan"), "JF_mean": float("nan")}
        j = np.array([r.J_mean for r in records])
        f = np.array([r.F_mean for r in records])
        jm, fm = float(j.mean()), float(f.mean())
        return {
            "J_mean": jm,
            "J_recall": float(np.mean(j > RECALL_THRESHOLD)),
            "F_mean": fm,
            "F_recall": float(np.mean(f > RECALL_THRESHOLD)),
            "JF_mean": (jm + fm) / 2,
        }

    @property
    def summary(self) -> dict[str, float]:
        return self._summary(self.records)

    def split_summary(self) -> dict[str, dict[str, float]]:
        tags = sorted({r.tag for r in self.records if r.tag})
        out = {t: self._summary([r for r in self.records if r.tag == t]) for t in tags}
        if {"seen", "unseen"} <= set(out):
            s, u = out["seen"], out["unseen"]
            out["overall"] = {"score": (s["J_mean"] + s["F_mean"] + u["J_mean"] + u["F_mean"]) / 4}
        return out

    def sequence_summary(self) -> dict[str, dict[str, float]]:
        names = list(dict.fromkeys(r.sequence for r in self.records))
        return {n: self._summary([r for r in self.records if r.sequence == n]) for n in names}

    def to_dict(self) -> dict:
        return {
            "summary": self.summary,
            "splits": self.split_summary(),
            "sequences": self.sequence_summary(),
            "objects": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self, title: str = "") -> str:
        """Aligned text table: one line per sequence plus the corpus mean."""
        head = f"{'Sequence':<24}{'J&F':>8}{'J(Mean)':>10}{'J(Rec)':>9}{'F(Mean)':>10}{'F(Rec)':>9}"
        lines = [title] if title else []
        lines += [head, "-" * len(head)]

        def row(name, s):
            return (f"{name:<24}{s['JF_mean'] * 100:8.1f}{s['J_mean'] * 100:10.1f}"
                    f"{s['J_recall'] * 100:9.1f}{s['F_mean'] * 100:10.1f}{s['F_recall'] * 100:9.1f}")

        for name, s in self.sequence_summary().items():
            lines.append(row(name, s))
        lines.append("-" * len(head))
        lines.append(row("mean", self.summary))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.txt").write_text(self.table())


def evaluate_sequence(
    name: str,
    preds: list[np.ndarray | None],
    gts: list[np.ndarray | None],
    tag: str | None = None,
    tolerance: float | None = None,
) -> list[ObjectRecord]:
    """Per-object scores over annotated frames 1..T-1 (frame 0 is given, not predicted)."""
    if gts[0] is None:
        raise CoverageError(f"{name}: no first-frame ground truth")
    num_objects = int(np.max(gts[0]))
    gaps = [k for k in range(1, len(gts)) if gts[k] is not None and (k >= len(preds) or preds[k] is None)]
    if gaps:
        raise CoverageError(f"{name}: missing predictions for annotated frames {gaps}")
    frames = [k for k in range(1, len(gts)) if gts[k] is not None]
    records = []
    for obj in range(1, num_objects + 1):
        js = [region_similarity(preds[k] == obj, gts[k] == obj) for k in frames]
        fs = [contour_accuracy(preds[k] == obj, gts[k] == obj, tolerance) for k in frames]
        records.append(
            ObjectRecord(
                name,
                obj,
                float(np.mean(js)) if js else 1.0,
                float(np.mean(fs)) if fs else 1.0,
                [float(v) for v in js],
                [float(v) for v in fs],
                tag,
            )
        )
    return records


def evaluate_arrays(
    preds: dict[str, list[np.ndarray | None]],
    gts: dict[str, list[np.ndarray | None]],
    split_tags: dict[str, str] | None = None,
) -> EvalReport:
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise CoverageError(f"no predictions for sequences {missing}")
    records = []
    for name in sorted(gts):
        tag = (split_tags or {}).get(name)
        records += evaluate_sequence(name, preds[name], gts[name], tag)
    return EvalReport(records)


def _read_dir(directory: Path, stems: list[str] | None = None) -> dict[str, np.ndarray]:
    return {p.stem: read_palette_png(p) for p in sorted(directory.glob("*.png"))}


def _sequence_dirs(root: Path) -> dict[str, Path]:
    base = root / "Annotations" if (root / "Annotations").is_dir() else root
    out = {}
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        # flat synthetic layout keeps masks in <seq>/masks
        out[d.name] = d / "masks" if (d / "masks").is_dir() else d
    return out


def evaluate_corpus(pred_dirs: str | Path, gt_dirs: str | Path, split_tags: dict[str, str] | None = None) -> EvalReport:
    """Score every ground-truth sequence under ``gt_dirs`` against ``pred_dirs/<sequence>``.

    Frame order follows the sorted ground-truth file stems; stems with a
    ground-truth file but no prediction file are coverage errors.
    """
    gt_seqs = _sequence_dirs(Path(gt_dirs))
    pred_seqs = _sequence_dirs(Path(pred_dirs))
    preds, gts = {}, {}
    for name, gdir in gt_seqs.items():
        g = _read_dir(gdir)
        if name not in pred_seqs:
            raise CoverageError(f"no prediction directory for sequence {name!r}")
        p = _read_dir(pred_seqs[name])
        stems = sorted(g)
        gts[name] = [g[s] for s in stems]
        preds[name] = [p.get(s) for s in stems]
    return evaluate_arrays(preds, gts, split_tags)
