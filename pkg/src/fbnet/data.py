"""Synthetic segmentation data, dataset files, and augmentation.

Synthetic images compose colored rectangles, ellipses and striped bands over a
textured gray background.  Shape type and base hue are tied to the class, with
per-instance color jitter and additive pixel noise, so color alone is an
unreliable cue (striped shapes in particular alternate bright and dark bands of
one class).  Labels are pixel-exact renderings of the shapes; background is
class 0 and 255 is the ignore index (it only enters via crop padding).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IGNORE_INDEX = 255


@dataclass
class Sample:
    image: np.ndarray   # float32, (3,H,W), values in [0,1]
    labels: np.ndarray  # int32, (H,W), values in {0..L-1} u {255}
    id: str = ""

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"sample {self.id!r}: image must be (3,H,W), got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise DataError(f"sample {self.id!r}: label extent {self.labels.shape} "
                            f"!= image extent {self.image.shape[1:]}")


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    shapes_min: int = 3
    shapes_max: int = 6
    noise: float = 0.05
    jitter: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"synthetic data needs num_classes >= 2, got {self.num_classes}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("canvas extent must be at least 8x8")
        if not 0 < self.shapes_min <= self.shapes_max:
            raise ConfigError("shapes-per-image range must satisfy 0 < min <= max")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def class_palette(num_classes: int) -> np.ndarray:
    """Base color per foreground class; saturated hues, spaced around the wheel."""
    colors = [_hsv_to_rgb((c - 1) / max(num_classes - 1, 1), 0.85, 0.95)
              for c in range(1, num_classes)]
    return np.stack(colors)


def _shape_mask(kind: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    ext = min(h, w)
    size_y = rng.integers(max(3, ext // 5), max(4, int(ext * 0.45)))
    size_x = rng.integers(max(3, ext // 5), max(4, int(ext * 0.45)))
    cy = rng.integers(0, h - 1)
    cx = rng.integers(0, w - 1)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 1:  # ellipse
        ry, rx = max(size_y // 2, 2), max(size_x // 2, 2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    y0, x0 = max(cy - size_y // 2, 0), max(cx - size_x // 2, 0)
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + size_y, x0:x0 + size_x] = True
    return mask


def _render(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    palette = class_palette(spec.num_classes)

    # textured background: gray base with a random low-amplitude gradient
    gy, gx = rng.uniform(-0.05, 0.05, 2)
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.40 + gy * (yy / max(h - 1, 1) - 0.5) + gx * (xx / max(w - 1, 1) - 0.5)
    image = np.repeat(base[None], 3, axis=0).astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int32)

    for _ in range(int(rng.integers(spec.shapes_min, spec.shapes_max + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        kind = (cls - 1) % 3
        mask = _shape_mask(kind, h, w, rng)
        if not mask.any():
            continue
        color = np.clip(palette[cls - 1] + rng.uniform(-spec.jitter, spec.jitter, 3), 0.0, 1.0)
        if kind == 2:
            # striped band: alternating bright/dark runs of the same class
            sw = int(rng.integers(2, 5))
            horizontal = rng.random() < 0.5
            coord = yy if horizontal else xx
            dark = (coord // sw) % 2 == 1
            image[:, mask & ~dark] = color[:, None]
            image[:, mask & dark] = (color * 0.45)[:, None]
        else:
            image[:, mask] = color[:, None]
        labels[mask] = cls

    if spec.noise > 0:
        image = image + spec.noise * rng.normal(size=image.shape)
    return np.clip(image, 0.0, 1.0), labels


def generate_synthetic(spec: SyntheticSpec, n: int) -> list[Sample]:
    """Deterministic dataset of n samples; sample i depends only on (seed, i)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 901, i]))
        image, labels = _render(spec, rng)
        out.append(Sample(image=image, labels=labels, id=f"{i:06d}"))
    return out


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_dataset(directory, samples: list[Sample]) -> None:
    from .io import save_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_tensor(directory / f"{s.id}.img.fbt", s.image)
        save_tensor(directory / f"{s.id}.lbl.fbt", s.labels)


def load_dataset(directory) -> list[Sample]:
    """Load `<id>.img.fbt` / `<id>.lbl.fbt` pairs, sorted by id."""
    from .io import load_tensor

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    imgs = {p.name[:-8]: p for p in directory.glob("*.img.fbt")}
    lbls = {p.name[:-8]: p for p in directory.glob("*.lbl.fbt")}
    orphans = sorted(set(imgs) ^ set(lbls))
    if orphans:
        raise DataError(f"unpaired dataset files for ids: {', '.join(orphans)}")
    samples = []
    for sid in sorted(imgs):
        image = load_tensor(imgs[sid])
        labels = load_tensor(lbls[sid])
        if image.ndim != 3 or labels.shape != image.shape[1:]:
            raise DataError(f"sample {sid}: image {image.shape} and labels {labels.shape} disagree")
        samples.append(Sample(image=image, labels=labels, id=sid))
    return samples


def class_histogram(samples: list[Sample], num_classes: int) -> np.ndarray:
    """Pixel counts per class index (last bin counts ignore pixels)."""
    hist = np.zeros(num_classes + 1, dtype=np.int64)
    for s in samples:
        valid = s.labels != IGNORE_INDEX
        hist[:num_classes] += np.bincount(s.labels[valid].ravel(), minlength=num_classes)
        hist[num_classes] += int((~valid).sum())
    return hist


# ---------------------------------------------------------------------------
# resizing and augmentation
# ---------------------------------------------------------------------------

def _lin_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear row-resampling matrix, align-corners=false, edge clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float32)
    np.add.at(m, (np.arange(n_out), i0c), (1.0 - t).astype(np.float32))
    np.add.at(m, (np.arange(n_out), i1c), t.astype(np.float32))
    return m


def resize_image(image: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = image.shape[1], image.shape[2]
    if (oh, ow) == (h, w):
        return image.copy()
    mh = _lin_matrix(h, oh)
    mw = _lin_matrix(w, ow)
    return np.einsum("oh,chw,pw->cop", mh, image, mw, optimize=True).astype(np.float32)


def resize_labels(labels: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = labels.shape
    if (oh, ow) == (h, w):
        return labels.copy()
    iy = np.clip(np.floor((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), 0, w - 1)
    return np.ascontiguousarray(labels[iy[:, None], ix[None, :]])


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label reduction by an integer factor (center sampling)."""
    off = factor // 2
    return np.ascontiguousarray(labels[..., off::factor, off::factor])


@dataclass
class DataConfig:
    base_size: int = 72
    crop_size: int = 64
    min_scale: float = 0.5
    max_scale: float = 2.0
    flip: bool = True
    augment: bool = True
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.crop_size % 8 != 0:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if not 0 < self.min_scale <= self.max_scale:
            raise ConfigError("scale range must satisfy 0 < min <= max")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0,1)")


def _resize_base(sample: Sample, base: int) -> Sample:
    h, w = sample.labels.shape
    if min(h, w) == base:
        return Sample(sample.image.copy(), sample.labels.copy(), sample.id)
    scale = base / min(h, w)
    oh = base if h <= w else int(round(h * scale))
    ow = base if w < h else int(round(w * scale))
    return Sample(resize_image(sample.image, oh, ow), resize_labels(sample.labels, oh, ow), sample.id)


def augment(sample: Sample, rng: np.random.Generator, cfg: DataConfig = DataConfig()) -> Sample:
    """resize-to-base, random scale, random crop (padded), random horizontal flip.

    Images are bilinearly resized; labels always use nearest-neighbor.  Crop
    padding uses zero pixels and the ignore label.  Draw order is fixed:
    scale, crop offsets, flip.
    """
    s = _resize_base(sample, cfg.base_size)
    factor = rng.uniform(cfg.min_scale, cfg.max_scale)
    h, w = s.labels.shape
    if factor != 1.0:
        oh, ow = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
        s = Sample(resize_image(s.image, oh, ow), resize_labels(s.labels, oh, ow), s.id)
        h, w = oh, ow

    crop = cfg.crop_size
    if h < crop or w < crop:
        ph, pw = max(crop - h, 0), max(crop - w, 0)
        image = np.pad(s.image, ((0, 0), (0, ph), (0, pw)))
        labels = np.pad(s.labels, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        s = Sample(image, labels, s.id)
        h, w = s.labels.shape
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    image = s.image[:, oy:oy + crop, ox:ox + crop]
    labels = s.labels[oy:oy + crop, ox:ox + crop]

    if cfg.flip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(labels), sample.id)


def eval_resize(sample: Sample, base: int) -> Sample:
    """Deterministic resize of the smaller side to ``base``; idempotent."""
    return _resize_base(sample, base)
