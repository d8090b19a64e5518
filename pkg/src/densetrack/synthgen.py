"""Synthetic videos from still images via smooth random homography trajectories.

Each sequence is a crop of the source image seen through a moving virtual
camera. Masks warped along the same chain give exact correspondence ground
truth, which the tests and the acceptance harness lean on heavily.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ParameterError, WarpError
from .ingest import Frame, MaskProbMap, Sequence, save_image, save_palette_png

MAX_RESAMPLE = 10
DET_FLOOR = 1e-6


@dataclass
class HomographyParams:
    max_translation: float = 4.0
    max_rotation: float = 0.02
    max_scale_delta: float = 0.02
    max_perspective: float = 1e-4
    length: int = 30
    seed: int = 0
    # output (height, width); defaults to half the source image
    crop: tuple[int, int] | None = None
    keyframe_every: int = 8

    def __post_init__(self):
        mags = (self.max_translation, self.max_rotation, self.max_scale_delta, self.max_perspective)
        if min(mags) < 0:
            raise ParameterError("homography magnitudes must be >= 0")
        if self.length < 2:
            raise ParameterError("sequence length must be >= 2")
        if self.keyframe_every < 1:
            raise ParameterError("keyframe_every must be >= 1")

    @property
    def bounds(self) -> np.ndarray:
        t, r, s, p = self.max_translation, self.max_rotation, self.max_scale_delta, self.max_perspective
        return np.array([t, t, r, s, p, p])


@dataclass
class SyntheticSequence(Sequence):
    """A :class:`Sequence` that also remembers the camera trajectory."""

    steps: list[np.ndarray] = field(default_factory=list)
    homographies: list[np.ndarray] = field(default_factory=list)
    step_params: np.ndarray | None = None
    seed: int | None = None


def step_matrix(p: np.ndarray, center: tuple[float, float]) -> np.ndarray:
    """Per-step homography from (tx, ty, rotation, scale delta, px, py).

    Rotation, scale and perspective act about ``center`` (x, y); translation
    is applied last in output coordinates.
    """
    tx, ty, rot, ds, px, py = (float(v) for v in p)
    cx, cy = center
    c, s = np.cos(rot), np.sin(rot)
    a = np.array([[(1 + ds) * c, -(1 + ds) * s, 0.0], [(1 + ds) * s, (1 + ds) * c, 0.0], [px, py, 1.0]])
    to_c = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    from_c = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    shift = np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]])
    return shift @ to_c @ a @ from_c


def interpolate_keyframes(keys: np.ndarray, length: int, every: int) -> np.ndarray:
    """Linear interpolation of keyframe parameter vectors onto steps 1..length-1."""
    knots = np.arange(keys.shape[0]) * every
    steps = np.arange(1, length)
    return np.stack([np.interp(steps, knots, keys[:, j]) for j in range(keys.shape[1])], axis=1)


def _inside(H: np.ndarray, crop: tuple[int, int], offset, src_shape) -> bool:
    # a homography without points at infinity maps the crop rectangle to a convex quad
    h, w = crop
    corners = np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]], dtype=np.float64).T
    p = H @ corners
    if np.any(p[2] <= 1e-12):
        return False
    x = p[0] / p[2] + offset[0]
    y = p[1] / p[2] + offset[1]
    return x.min() >= 0 and y.min() >= 0 and x.max() <= src_shape[1] - 1 and y.max() <= src_shape[0] - 1


def sample_steps(
    params: HomographyParams, rng: np.random.Generator, center, fits=None
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Draw a keyframed trajectory, redrawing (up to ``MAX_RESAMPLE`` times) degenerate ones.

    ``fits`` is an optional predicate on cumulative matrices; trajectories
    failing it (e.g. exposing the source border) are redrawn too.
    """
    n_keys = (params.length - 1) // params.keyframe_every + 2
    bounds = params.bounds
    for _ in range(MAX_RESAMPLE):
        keys = rng.uniform(-1.0, 1.0, size=(n_keys, 6)) * bounds
        vecs = interpolate_keyframes(keys, params.length, params.keyframe_every)
        mats = [step_matrix(v, center) for v in vecs]
        cumulative = compose(mats)
        if not all(abs(np.linalg.det(m)) > DET_FLOOR for m in mats + cumulative):
            continue
        if fits is not None and not all(fits(m) for m in cumulative):
            continue
        return vecs, mats
    raise ParameterError(f"no usable trajectory after {MAX_RESAMPLE} draws")


def compose(steps: Iterable[np.ndarray]) -> list[np.ndarray]:
    """Cumulative products ``[I, S1, S1 S2, ...]``."""
    out = [np.eye(3)]
    for s in steps:
        out.append(out[-1] @ s)
    return out


def translation_steps(dx: float, dy: float, length: int) -> list[np.ndarray]:
    m = np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]])
    return [m.copy() for _ in range(length - 1)]


def _source_coords(H: np.ndarray, out_shape: tuple[int, int], offset: tuple[float, float]) -> np.ndarray:
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = H @ pts
    if np.any(np.abs(src[2]) < 1e-12):
        raise WarpError("homography maps output pixels to infinity")
    x = src[0] / src[2] + offset[0]
    y = src[1] / src[2] + offset[1]
    return np.stack([y.reshape(h, w), x.reshape(h, w)])


def warp(
    image: np.ndarray, H: np.ndarray, out_shape: tuple[int, int], offset: tuple[float, float], order: int = 1
) -> np.ndarray:
    """Sample ``image`` (C x H x W, or H x W) at ``H @ p + offset`` for every output pixel ``p``."""
    coords = _source_coords(H, out_shape, offset)
    src_h, src_w = image.shape[-2:]
    tol = 1e-6
    if (
        coords[0].min() < -tol
        or coords[1].min() < -tol
        or coords[0].max() > src_h - 1 + tol
        or coords[1].max() > src_w - 1 + tol
    ):
        raise WarpError("warp exposes pixels outside the source image")
    coords = np.clip(coords, 0, [[[src_h - 1]], [[src_w - 1]]])
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=order, mode="nearest")
    return np.stack([ndimage.map_coordinates(ch, coords, order=order, mode="nearest") for ch in image])


def simulate_sequence(
    image: Frame,
    params: HomographyParams,
    labels: np.ndarray | None = None,
    steps: list[np.ndarray] | None = None,
    occlusion: tuple[Frame, Iterable[int]] | None = None,
    name: str = "synthetic",
) -> SyntheticSequence:
    """Warp ``image`` along a smooth random camera trajectory.

    ``labels`` (palette indices) are warped along the same chain with
    nearest-neighbour sampling and returned as per-frame masks. ``steps``
    overrides the random trajectory. ``occlusion`` is ``(background, frames)``:
    on the listed frames the object-free ``background`` is shown instead and
    the mask is empty.
    """
    if image.color_space != "RGB":
        raise ValueError("simulate_sequence expects an RGB image")
    src_h, src_w = image.height, image.width
    crop = params.crop or (src_h // 2, src_w // 2)
    if src_h < 2 * crop[0] or src_w < 2 * crop[1]:
        raise WarpError(f"source {src_h}x{src_w} must be at least twice the crop {crop}")
    center = ((crop[1] - 1) / 2.0, (crop[0] - 1) / 2.0)
    offset = ((src_w - crop[1]) / 2.0, (src_h - crop[0]) / 2.0)
    rng = np.random.default_rng(params.seed)

    if steps is None:
        vecs, steps = sample_steps(
            params, rng, center, fits=lambda H: _inside(H, crop, offset, (src_h, src_w))
        )
    else:
        if len(steps) != params.length - 1:
            raise ParameterError(f"expected {params.length - 1} step matrices, got {len(steps)}")
        vecs = None
    homs = compose(steps)

    hidden = set(occlusion[1]) if occlusion else set()
    num_objects = int(labels.max()) if labels is not None else 1
    frames, masks = [], []
    for k, H in enumerate(homs):
        src = occlusion[0] if k in hidden else image
        pixels = np.clip(warp(src.pixels, H, crop, offset, order=1), 0.0, 1.0)
        frames.append(Frame(pixels, "RGB", k))
        if labels is not None:
            lab = np.zeros(crop, dtype=np.uint8) if k in hidden else warp(labels, H, crop, offset, order=0)
            masks.append(MaskProbMap.from_labels(lab.astype(np.uint8), num_objects))
    return SyntheticSequence(
        frames,
        masks if labels is not None else None,
        num_objects,
        name,
        steps=list(steps),
        homographies=homs,
        step_params=vecs,
        seed=params.seed,
    )


def derive_seed(base: int, image_index: int, sequence_index: int) -> int:
    ss = np.random.SeedSequence([base, image_index, sequence_index])
    return int(ss.generate_state(1)[0])


def build_lowdata_corpus(
    images: list[Frame],
    sequences_per_image: int,
    params: HomographyParams,
    labels: list[np.ndarray | None] | None = None,
) -> list[SyntheticSequence]:
    """``len(images) * sequences_per_image`` sequences, each with its own derived seed."""
    if not images:
        raise ParameterError("at least one image is required")
    if sequences_per_image < 1:
        raise ParameterError("sequences_per_image must be >= 1")
    corpus = []
    for i, img in enumerate(images):
        for j in range(sequences_per_image):
            p = HomographyParams(**{**asdict(params), "seed": derive_seed(params.seed, i, j)})
            try:
                seq = simulate_sequence(
                    img, p, labels[i] if labels is not None else None, name=f"img{i:04d}_seq{j:02d}"
                )
            except (WarpError, ParameterError) as exc:
                raise type(exc)(f"image {i}: {exc}") from exc
            corpus.append(seq)
    return corpus


# ------------------------------------------------------------------ still images


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def textured_image(
    size: tuple[int, int], rng: np.random.Generator, num_objects: int = 1, object_radius: float | None = None
) -> tuple[Frame, np.ndarray, Frame]:
    """A random textured scene with elliptical objects.

    Returns ``(image, labels, background)``; ``background`` is the same scene
    with every object removed, used to script occlusions.
    """
    h, w = size
    tex = sum(_smooth_noise(rng, (3, h, w), s) * a for s, a in ((1.5, 0.08), (4.0, 0.12), (10.0, 0.15)))
    base = rng.uniform(0.3, 0.6, size=3)
    base[0] = 0.25  # background stays away from the object reds
    background = np.clip(base[:, None, None] + tex, 0, 1)

    image = background.copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    ys, xs = np.mgrid[0:h, 0:w]
    r0 = object_radius or min(h, w) / 10
    for obj in range(1, num_objects + 1):
        cy = h / 2 + rng.uniform(-0.1, 0.1) * h + (obj - 1) * r0 * 1.2
        cx = w / 2 + rng.uniform(-0.1, 0.1) * w - (obj - 1) * r0 * 2.4
        ry, rx = r0 * rng.uniform(0.8, 1.2), r0 * rng.uniform(0.8, 1.2)
        inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        colour = np.array([0.85, 0.2 + 0.5 * rng.uniform(), 0.25 * obj])
        obj_tex = sum(_smooth_noise(rng, (3, h, w), s) * a for s, a in ((1.0, 0.05), (3.0, 0.08)))
        fill = np.clip(colour[:, None, None] + obj_tex, 0, 1)
        image[:, inside] = fill[:, inside]
        labels[inside] = obj
    return Frame(image, "RGB"), labels, Frame(background, "RGB")


# ------------------------------------------------------------- canned corpora


def translation_corpus(
    n: int, seed: int = 0, frame_size: int = 128, length: int = 30, dx: float = 2.0, dy: float = 0.0
) -> list[SyntheticSequence]:
    """Constant-velocity camera pans with exact oracle masks."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, labels, _ = textured_image((2 * frame_size, 2 * frame_size), rng, object_radius=frame_size / 5)
        params = HomographyParams(length=length, seed=seed + i, crop=(frame_size, frame_size))
        sgn = 1 if i % 2 == 0 else -1
        steps = translation_steps(sgn * dx, dy, length)
        out.append(simulate_sequence(img, params, labels, steps=steps, name=f"translate{i:03d}"))
    return out


def occlusion_corpus(
    n: int,
    seed: int = 0,
    frame_size: int = 128,
    length: int = 31,
    hidden: range = range(10, 16),
    dx: float = 1.5,
) -> list[SyntheticSequence]:
    """Pans in which every object vanishes on ``hidden`` frames and then returns in place."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, labels, bg = textured_image((2 * frame_size, 2 * frame_size), rng, object_radius=frame_size / 5)
        params = HomographyParams(length=length, seed=seed + i, crop=(frame_size, frame_size))
        sgn = 1 if i % 2 == 0 else -1
        steps = translation_steps(sgn * dx, 0.5 * sgn, length)
        out.append(
            simulate_sequence(img, params, labels, steps=steps, occlusion=(bg, hidden), name=f"occlude{i:03d}")
        )
    return out


def random_corpus(
    n: int, seed: int = 0, frame_size: int = 64, length: int = 30, num_objects: int = 1
) -> list[SyntheticSequence]:
    """One random-trajectory sequence per freshly drawn still image.

    Sources are three times the crop so default-magnitude trajectories rarely
    run into the border.
    """
    rng = np.random.default_rng(seed)
    imgs, labs = [], []
    for _ in range(n):
        img, lab, _ = textured_image(
            (3 * frame_size, 3 * frame_size), rng, num_objects=num_objects, object_radius=frame_size / 5
        )
        imgs.append(img)
        labs.append(lab)
    params = HomographyParams(length=length, seed=seed, crop=(frame_size, frame_size))
    return build_lowdata_corpus(imgs, 1, params, labs)


def write_sequence(seq: Sequence, out_dir: str | Path, params: dict | None = None) -> Path:
    """Write a sequence in the flat layout: ``frames/``, ``masks/`` and a ``params.txt`` sidecar."""
    out = Path(out_dir) / seq.name
    for stem, frame in zip(seq.stems, seq.frames):
        save_image(frame.pixels, out / "frames" / f"{stem}.png")
    if seq.masks:
        for stem, m in zip(seq.stems, seq.masks):
            if m is not None:
                save_palette_png(m.labels(), out / "masks" / f"{stem}.png")
    meta = {"name": seq.name, "length": len(seq), "num_objects": seq.num_objects}
    if isinstance(seq, SyntheticSequence):
        meta["seed"] = seq.seed
        meta["homographies"] = [h.tolist() for h in seq.homographies]
    if params:
        meta["params"] = params
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.txt").write_text(json.dumps(meta, indent=1) + "\n")
    return out
