"""Frames, masks and sequences: loading, colour conversion and cropping."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence as SequenceT

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AnnotationError, LoadError, OrderingError, RangeError, ShapeError, SizeError

ColorSpace = Literal["RGB", "Lab"]
Layout = Literal["davis", "ytvos", "flat"]

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

# sRGB (D65) -> XYZ, and the D65 reference white
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


@dataclass
class Frame:
    """One video image, ``pixels`` laid out channels x height x width."""

    pixels: np.ndarray
    color_space: ColorSpace = "RGB"
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"frame pixels must be 3 x H x W, got {self.pixels.shape}")
        if self.color_space not in ("RGB", "Lab"):
            raise ValueError(f"unknown colour space {self.color_space!r}")
        if self.index < 0:
            raise ValueError("frame index must be >= 0")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class MaskProbMap:
    """Per-pixel class probabilities, channel 0 is background."""

    probs: np.ndarray
    resolution_tag: Literal["full", "feature"] = "full"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 3 or self.probs.shape[0] < 1:
            raise ShapeError(f"mask probabilities must be (M+1) x H x W, got {self.probs.shape}")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=0).astype(np.uint8)

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_objects: int, resolution_tag="full") -> "MaskProbMap":
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got {labels.shape}")
        if labels.size and labels.max() > num_objects:
            raise AnnotationError(f"label {labels.max()} exceeds object count {num_objects}")
        probs = np.eye(num_objects + 1, dtype=np.float32)[labels.astype(np.int64)]
        return cls(np.moveaxis(probs, -1, 0), resolution_tag)


@dataclass
class Sequence:
    frames: list[Frame]
    masks: list[MaskProbMap | None] | None = None
    num_objects: int = 1
    name: str = "sequence"
    # original file stems, used when writing results back out
    stems: list[str] = field(default_factory=list)

    def __post_init__(self):
        for k, frame in enumerate(self.frames):
            if frame.index != k:
                raise OrderingError(f"frame {k} of {self.name!r} carries index {frame.index}")
        if self.masks is not None and len(self.masks) != len(self.frames):
            raise ShapeError("masks must be given per frame (use None for unannotated frames)")
        if not self.stems:
            self.stems = [f"{k:05d}" for k in range(len(self.frames))]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def first_mask(self) -> MaskProbMap | None:
        return self.masks[0] if self.masks else None


# --------------------------------------------------------------------------- colour


def _check_rgb(pixels: np.ndarray) -> None:
    if pixels.size and (pixels.min() < -1e-6 or pixels.max() > 1 + 1e-6):
        raise RangeError(f"RGB values must lie in [0, 1], got [{pixels.min()}, {pixels.max()}]")


def rgb_to_lab(frame: Frame) -> Frame:
    """sRGB in [0, 1] to CIE Lab under D65."""
    if frame.color_space != "RGB":
        raise ValueError(f"expected an RGB frame, got {frame.color_space}")
    _check_rgb(frame.pixels)
    rgb = np.clip(frame.pixels.astype(np.float64), 0.0, 1.0)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = np.einsum("ij,jhw->ihw", _RGB_TO_XYZ, linear) / D65_WHITE[:, None, None]
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), (_LAB_KAPPA * xyz + 16.0) / 116.0)
    lab = np.stack([116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])])
    return Frame(lab.astype(np.float32), "Lab", frame.index)


def lab_to_rgb(frame: Frame) -> Frame:
    """Analytic inverse of :func:`rgb_to_lab`; out-of-gamut colours are clipped."""
    if frame.color_space != "Lab":
        raise ValueError(f"expected a Lab frame, got {frame.color_space}")
    lab = frame.pixels.astype(np.float64)
    fy = (lab[0] + 16.0) / 116.0
    fx = fy + lab[1] / 500.0
    fz = fy - lab[2] / 200.0
    f = np.stack([fx, fy, fz])
    xyz = np.where(f**3 > _LAB_EPS, f**3, (116.0 * f - 16.0) / _LAB_KAPPA) * D65_WHITE[:, None, None]
    linear = np.einsum("ij,jhw->ihw", _XYZ_TO_RGB, xyz)
    linear = np.clip(linear, 0.0, 1.0)
    rgb = np.where(linear > 0.0031308, 1.055 * linear ** (1 / 2.4) - 0.055, 12.92 * linear)
    return Frame(np.clip(rgb, 0.0, 1.0).astype(np.float32), "RGB", frame.index)


def lab_to_network(pixels: np.ndarray | torch.Tensor):
    """Rescale Lab to roughly [-1, 1] per channel; the scale the networks see."""
    scale = (50.0, 128.0, 128.0)
    offset = (50.0, 0.0, 0.0)
    if isinstance(pixels, torch.Tensor):
        s = pixels.new_tensor(scale).view(-1, 1, 1)
        o = pixels.new_tensor(offset).view(-1, 1, 1)
    else:
        s = np.array(scale, dtype=np.float32)[:, None, None]
        o = np.array(offset, dtype=np.float32)[:, None, None]
    return (pixels - o) / s


# ----------------------------------------------------------------------- geometry


def resize_array(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a C x H x W array (half-pixel centres, no antialiasing)."""
    if pixels.shape[1:] == (height, width):
        return pixels.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].numpy()


def sample_crop_box(
    height: int,
    width: int,
    target: int,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.7, 1.0),
) -> tuple[int, int, int]:
    """Random square ``(top, left, side)`` whose side is a fraction of the short side."""
    if target % 4:
        raise SizeError(f"target {target} must be divisible by 4")
    if min(height, width) < target / 2:
        raise SizeError(f"frame {height}x{width} is smaller than half the target {target}")
    short = min(height, width)
    side = int(round(rng.uniform(*scale_range) * short))
    side = max(1, min(side, short))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return top, left, side


def crop_resize(frame: Frame, box: tuple[int, int, int], target: int) -> Frame:
    top, left, side = box
    crop = frame.pixels[:, top : top + side, left : left + side]
    return Frame(resize_array(crop, target, target), frame.color_space, frame.index)


def random_crop_resize(
    frame: Frame,
    target: int,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.7, 1.0),
) -> Frame:
    """Random square crop followed by a bilinear resize to ``target`` x ``target``."""
    box = sample_crop_box(frame.height, frame.width, target, rng, scale_range)
    return crop_resize(frame, box, target)


def pad_to_multiple(pixels: np.ndarray, multiple: int = 4) -> np.ndarray:
    """Edge-replicate bottom/right so both spatial dims are multiples of ``multiple``."""
    h, w = pixels.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return pixels
    pad = [(0, 0)] * (pixels.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(pixels, pad, mode="edge")


# ------------------------------------------------------------------------ palette


def davis_palette() -> np.ndarray:
    """The 256-entry PASCAL/DAVIS colour map as a (256, 3) uint8 array."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette[i] = (r, g, b)
    return palette


def save_palette_png(labels: np.ndarray, path: str | Path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise RangeError("palette indices must lie in [0, 255]")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(davis_palette().ravel().tolist())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def read_palette_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("P", "L"):
        return np.array(img, dtype=np.uint8)
    # RGB-encoded annotations: map colours back through the palette
    rgb = np.array(img.convert("RGB"), dtype=np.int64)
    lut = {tuple(c): i for i, c in enumerate(davis_palette().tolist())}
    flat = rgb.reshape(-1, 3)
    try:
        out = np.array([lut[tuple(c)] for c in flat.tolist()], dtype=np.uint8)
    except KeyError as exc:
        raise AnnotationError(f"{path}: colour {exc} is not in the palette") from None
    return out.reshape(rgb.shape[:2])


def read_image(path: str | Path) -> np.ndarray:
    """8-bit image file to a float32 3 x H x W array in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0).copy()


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.moveaxis(pixels, 0, -1) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# ------------------------------------------------------------------------ loading


_NUM = re.compile(r"(\d+)")


def _list_images(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    last = None
    for p in files:
        m = _NUM.search(p.stem)
        if m is None:
            continue
        n = int(m.group(1))
        if last is not None and n <= last:
            raise OrderingError(f"{directory}: frame numbering is not monotonic at {p.name}")
        last = n
    return files


def _resolve_dirs(root: Path, layout: Layout, sequence: str | None) -> tuple[Path, Path | None, str]:
    if layout == "flat":
        return root, None, sequence or root.name
    frames_root = root / "JPEGImages"
    ann_root = root / "Annotations"
    if not frames_root.is_dir():
        raise LoadError(f"{root}: missing JPEGImages directory")
    if sequence is None:
        names = sorted(p.name for p in frames_root.iterdir() if p.is_dir())
        if len(names) != 1:
            raise LoadError(f"{root}: {len(names)} sequences found, name one explicitly")
        sequence = names[0]
    return frames_root / sequence, ann_root / sequence, sequence


def load_sequence(
    root_path: str | Path,
    layout: Layout = "davis",
    sequence: str | None = None,
    mask_path: str | Path | None = None,
) -> Sequence:
    """Read a sequence from a DAVIS, YouTube-VOS or flat directory.

    For ``flat`` the frames live directly in ``root_path``; ``mask_path`` may
    point at a single frame-0 annotation or at a directory of per-frame masks
    named like the frames.
    """
    root = Path(root_path)
    if layout not in ("davis", "ytvos", "flat"):
        raise ValueError(f"unknown layout {layout!r}")
    frame_dir, ann_dir, name = _resolve_dirs(root, layout, sequence)
    if not frame_dir.is_dir():
        raise LoadError(f"missing frame directory {frame_dir}")
    files = _list_images(frame_dir)
    if not files:
        raise LoadError(f"no frames in {frame_dir}")
    stems = [p.stem for p in files]
    frames = [Frame(read_image(p), "RGB", k) for k, p in enumerate(files)]

    labels: list[np.ndarray | None] = [None] * len(frames)
    if layout != "flat":
        if ann_dir is None or not ann_dir.is_dir():
            raise AnnotationError(f"missing annotation directory for {name!r}")
        for k, stem in enumerate(stems):
            p = ann_dir / f"{stem}.png"
            if p.exists():
                labels[k] = read_palette_png(p)
        if labels[0] is None:
            raise AnnotationError(f"{name!r}: no annotation for the first frame")
    elif mask_path is not None:
        mp = Path(mask_path)
        if mp.is_dir():
            for k, stem in enumerate(stems):
                p = mp / f"{stem}.png"
                if p.exists():
                    labels[k] = read_palette_png(p)
        elif mp.exists():
            labels[0] = read_palette_png(mp)
        if labels[0] is None:
            raise AnnotationError(f"{mask_path}: no first-frame annotation")

    if labels[0] is None:
        return Sequence(frames, None, 1, name, stems)
    num_objects = int(labels[0].max())
    if num_objects == 0:
        raise AnnotationError(f"{name!r}: first-frame annotation contains no objects")
    masks: list[MaskProbMap | None] = []
    for k, lab in enumerate(labels):
        if lab is None:
            masks.append(None)
            continue
        if lab.shape != frames[k].pixels.shape[1:]:
            raise AnnotationError(f"{name!r}: mask {stems[k]} shape {lab.shape} does not match frame")
        # objects absent from frame 0 are not tracked
        lab = np.where(lab > num_objects, 0, lab)
        masks.append(MaskProbMap.from_labels(lab, num_objects))
    return Sequence(frames, masks, num_objects, name, stems)


def to_lab_frames(frames: SequenceT[Frame]) -> list[Frame]:
    return [f if f.color_space == "Lab" else rgb_to_lab(f) for f in frames]


def with_index(frame: Frame, index: int) -> Frame:
    return replace(frame, index=index)
