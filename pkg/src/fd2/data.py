"""Datasets: procedural fine-grained toy generator and image-folder loading.

The toy generator builds images whose coarse structure (background pattern,
colors, layout) is drawn independently of the class, while the class is
encoded only by two small glyph marks placed at random positions. Classes
share glyphs pairwise, so telling them apart requires the combination of
both marks, which is the subtle-difference regime the pipeline targets.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ValidationError

SPLITS = ("train", "val", "test")
_SPLIT_ID = {"train": 0, "val": 1, "test": 2}
IMAGE_EXTS = (".png", ".jpg", ".jpeg")

GLYPH_CELLS = 5


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, 3, H, W), normalized to [-1, 1]
    labels: torch.Tensor  # (N,) int64
    classes: list

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def num_classes(self):
        return len(self.classes)

    def of_class(self, k):
        return self.images[self.labels == k]


def to_normalized(uint8_hwc):
    """uint8 ``(..., H, W, 3)`` -> float ``(..., 3, H, W)`` in [-1, 1]."""
    arr = torch.from_numpy(np.ascontiguousarray(uint8_hwc)).float().div(255.0)
    arr = arr.movedim(-1, -3)
    return (arr - 0.5) / 0.5


def to_uint8(images):
    """Inverse of :func:`to_normalized` with rounding: ``(..., 3, H, W)`` -> ``(..., H, W, 3)``."""
    x = (images.detach().cpu().float() * 0.5 + 0.5).clamp(0.0, 1.0)
    x = torch.round(x * 255.0).to(torch.uint8)
    return x.movedim(-3, -1).numpy()


def quantize(images):
    """Round-trip through 8-bit storage."""
    return to_normalized(to_uint8(images)).to(images.dtype)


# -- toy generator -----------------------------------------------------------

@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 10
    train_per_class: int = 200
    val_per_class: int = 40
    test_per_class: int = 50
    image_size: int = 64
    base_patterns: int = 4
    marks: bool = True
    noise: float = 0.04
    seed: int = 0
    glyph_cell: int = 2  # pixels per glyph cell

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("toy dataset needs at least 2 classes")
        if not 1 <= self.base_patterns <= 4:
            raise ConfigError("base_patterns must be in [1, 4]")
        if self.image_size < 4 * GLYPH_CELLS * self.glyph_cell:
            raise ConfigError(f"image_size {self.image_size} too small for the glyph marks")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def glyph_bank(num_classes, seed=0):
    """Return ``(pool, pairs)``: binary 5x5 glyphs and the glyph pair of each class.

    The pool is the smallest size whose unordered pairs cover every class; pool
    glyphs differ from each other in at least 6 cells.
    """
    pool_size = 2
    while pool_size * (pool_size - 1) // 2 < num_classes:
        pool_size += 1
    rng = np.random.default_rng([seed, 7919])
    pool = []
    while len(pool) < pool_size:
        g = rng.random((GLYPH_CELLS, GLYPH_CELLS)) < 0.5
        if not 9 <= g.sum() <= 16:
            continue
        if all(np.sum(g != h) >= 6 for h in pool):
            pool.append(g)
    pairs = list(itertools.combinations(range(pool_size), 2))
    order = rng.permutation(len(pairs))[:num_classes]
    return np.stack(pool), [pairs[i] for i in sorted(order)]


def _grid(n):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64) / max(n - 1, 1)
    return x, y


def _background(kind, rng, n):
    x, y = _grid(n)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    if kind == 0:  # linear gradient
        a = rng.uniform(0, 2 * np.pi)
        t = (np.cos(a) * (x - 0.5) + np.sin(a) * (y - 0.5)) + 0.5
    elif kind == 1:  # sinusoidal stripes
        a = rng.uniform(0, np.pi)
        f = rng.uniform(1.5, 4.0)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * f * (np.cos(a) * x + np.sin(a) * y) + rng.uniform(0, 2 * np.pi))
    elif kind == 2:  # soft blobs
        t = np.zeros_like(x)
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.uniform(0, 1, 2)
            s = rng.uniform(0.08, 0.25)
            t += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        t = t / max(t.max(), 1e-9)
    else:  # concentric rings
        cx, cy = rng.uniform(0.2, 0.8, 2)
        f = rng.uniform(2.0, 5.0)
        t = 0.5 + 0.5 * np.cos(2 * np.pi * f * np.hypot(x - cx, y - cy))
    t = np.clip(t, 0.0, 1.0)[..., None]
    return (1 - t) * c0 + t * c1


def _place_marks(img, glyphs, rng, cell):
    """Stamp glyphs at non-overlapping random positions; return the mark mask."""
    n = img.shape[0]
    size = GLYPH_CELLS * cell
    mask = np.zeros((n, n), dtype=bool)
    boxes = []
    for g in glyphs:
        for _ in range(1000):
            r, c = rng.integers(1, n - size - 1, size=2)
            if all(abs(r - r2) > size + 1 or abs(c - c2) > size + 1 for r2, c2 in boxes):
                break
        boxes.append((r, c))
        big = np.kron(g, np.ones((cell, cell), dtype=bool))
        patch = img[r:r + size, c:c + size]
        lum = patch.mean()
        ink = np.zeros(3) if lum > 0.5 else np.ones(3)
        patch[big] = ink
        mask[r:r + size, c:c + size] |= big
    return mask


def render_sample(spec, split, class_id, index, return_mask=False):
    """Render one toy image as float ``(H, W, 3)`` in [0, 1]."""
    sid = _SPLIT_ID[split]
    # coarse structure is keyed by sample index only, never by class
    bg_rng = np.random.default_rng([spec.seed, sid, index, 1])
    kind = int(bg_rng.integers(0, spec.base_patterns))
    img = _background(kind, bg_rng, spec.image_size)
    rng = np.random.default_rng([spec.seed, sid, index, 2, class_id])
    mask = np.zeros(img.shape[:2], dtype=bool)
    if spec.marks:
        pool, pairs = glyph_bank(spec.num_classes, spec.seed)
        a, b = pairs[class_id]
        order = (a, b) if rng.random() < 0.5 else (b, a)
        mask = _place_marks(img, [pool[order[0]], pool[order[1]]], rng, spec.glyph_cell)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (img, mask) if return_mask else img


def class_names(num_classes):
    width = max(2, len(str(num_classes - 1)))
    return [f"class_{k:0{width}d}" for k in range(num_classes)]


def generate_toy_arrays(spec, split):
    """Return ``(uint8 images (N, H, W, 3), labels (N,))`` for one split."""
    per_class = {"train": spec.train_per_class, "val": spec.val_per_class, "test": spec.test_per_class}[split]
    images, labels = [], []
    for k in range(spec.num_classes):
        for j in range(per_class):
            img = render_sample(spec, split, k, j)
            images.append(np.round(img * 255.0).astype(np.uint8))
            labels.append(k)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def toy_dataset(spec, split):
    images, labels = generate_toy_arrays(spec, split)
    return ImageDataset(to_normalized(images), torch.from_numpy(labels), class_names(spec.num_classes))


def gen_toy_dataset(spec, out):
    """Write ``<out>/{train,val,test}/<class_name>/<index>.png``."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output path {out} already exists and is not empty")
    names = class_names(spec.num_classes)
    for split in SPLITS:
        images, labels = generate_toy_arrays(spec, split)
        counters = {}
        for img, lab in zip(images, labels):
            d = out / split / names[lab]
            d.mkdir(parents=True, exist_ok=True)
            idx = counters.get(lab, 0)
            counters[lab] = idx + 1
            Image.fromarray(img, mode="RGB").save(d / f"{idx:04d}.png", optimize=False)
    return out


def load_image_folder(path, image_size=None):
    """Load ``<path>/<class_name>/*.png|jpg``; classes are indexed in sorted name order."""
    path = Path(path)
    if not path.is_dir():
        raise ValidationError(f"{path} is not a directory")
    classes = sorted(p.name for p in path.iterdir() if p.is_dir())
    if not classes:
        raise ValidationError(f"{path} contains no class directories")
    images, labels = [], []
    for k, name in enumerate(classes):
        files = sorted(f for f in (path / name).iterdir() if f.suffix.lower() in IMAGE_EXTS)
        if not files:
            raise ValidationError(f"class directory {path / name} contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.uint8)
            except Exception as exc:  # PIL raises several unrelated types
                raise ValidationError(f"cannot decode image {f}: {exc}") from exc
            images.append(arr)
            labels.append(k)
    sizes = {a.shape for a in images}
    if len(sizes) != 1:
        raise ValidationError(f"{path}: images have mixed sizes {sorted(sizes)}; pass image_size")
    return ImageDataset(to_normalized(np.stack(images)), torch.tensor(labels, dtype=torch.long), classes)
