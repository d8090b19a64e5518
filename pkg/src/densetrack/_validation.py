"""Input checks for the estimator facade."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ConfigError, ShapeError
from .ingest import Frame, MaskProbMap, Sequence


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_odd(value, name: str) -> int:
    value = check_positive_int(value, name)
    if value % 2 == 0:
        raise ConfigError(f"{name} must be odd, got {value}")
    return value


def check_unit_interval(value, name: str, closed_right: bool = False) -> float:
    ok = 0 <= value <= 1 if closed_right else 0 <= value < 1
    if not ok:
        raise ConfigError(f"{name} must lie in [0, 1{']' if closed_right else ')'}, got {value!r}")
    return float(value)


def as_frame(x, index: int = 0) -> Frame:
    """Accept a :class:`Frame`, a (3, H, W) array or an (H, W, 3) array in [0, 1] RGB."""
    if isinstance(x, Frame):
        return x
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 3:
        raise ShapeError(f"expected a 3-D image array, got shape {a.shape}")
    if a.shape[0] != 3 and a.shape[-1] == 3:
        a = np.moveaxis(a, -1, 0)
    return Frame(np.ascontiguousarray(a), "RGB", index)


def check_frames(X) -> list[Frame]:
    if isinstance(X, Sequence):
        return list(X.frames)
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    frames = [as_frame(x, k) for k, x in enumerate(X)]
    if not frames:
        raise ShapeError("need at least one frame")
    shapes = {f.pixels.shape for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"frames disagree in size: {sorted(shapes)}")
    return frames


def check_sequences(X, require_masks: bool = False) -> list[Sequence]:
    seqs = [X] if isinstance(X, Sequence) else list(X)
    if not seqs or not all(isinstance(s, Sequence) for s in seqs):
        raise ShapeError("expected a Sequence or a non-empty list of Sequence objects")
    if require_masks:
        bare = [s.name for s in seqs if s.first_mask is None]
        if bare:
            raise ShapeError(f"sequences lack a first-frame mask: {bare}")
    return seqs


def check_masks(y, frames: list[Frame], num_objects: int | None = None) -> list[MaskProbMap]:
    """Accept label maps (H, W) or probability maps, one per frame."""
    y = list(y)
    if len(y) != len(frames):
        raise ShapeError(f"{len(y)} masks for {len(frames)} frames")
    if num_objects is None:
        num_objects = max(
            (m.num_classes - 1 if isinstance(m, MaskProbMap) else int(np.max(m)) for m in y), default=0
        )
    out = []
    for m, f in zip(y, frames):
        if not isinstance(m, MaskProbMap):
            m = MaskProbMap.from_labels(np.asarray(m), num_objects)
        if m.probs.shape[1:] != f.pixels.shape[1:]:
            raise ShapeError(f"mask {m.probs.shape[1:]} does not match frame {f.pixels.shape[1:]}")
        out.append(m)
    if out[0].num_classes < 2:
        raise ShapeError("masks contain no objects")
    return out
