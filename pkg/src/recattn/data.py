"""Synthetic multi-label shapes dataset, augmentation and on-disk layout."""

import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import read_raster, write_raster

COLORS = {"red": (200, 40, 40), "green": (40, 180, 50), "blue": (40, 60, 200)}

# (kind, color, base size in px at N=64, width:height aspect)
DEFAULT_VOCAB = (
    ("circle", "red", 8.0, 1.0),
    ("circle", "green", 20.0, 1.0),
    ("square", "red", 12.0, 2.0),
    ("square", "green", 24.0, 0.5),
    ("triangle", "red", 16.0, 1.0),
    ("triangle", "green", 10.0, 2.0),
)


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int = 64
    objects_per_image: tuple = (1, 3)
    vocab: tuple = DEFAULT_VOCAB
    scale_jitter: float = 0.15
    aspect_jitter: float = 0.15
    max_iou: float = 0.5
    noise_std: float = 12.0
    distractors: int = 3
    seed: int = 0

    @property
    def num_classes(self):
        return len(self.vocab)

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi <= self.num_classes:
            raise ValueError(f"objects_per_image {self.objects_per_image} invalid for "
                             f"{self.num_classes} classes")


@dataclass
class SyntheticSample:
    image: np.ndarray            # (N, N, 3) uint8
    labels: np.ndarray           # (C,) uint8
    boxes: list = field(default_factory=list)  # (class, x0, y0, x1, y1) pixels; diagnostics only


@dataclass
class Dataset:
    images: np.ndarray   # (n, N, N, 3) uint8
    labels: np.ndarray   # (n, C) uint8
    boxes: list

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], [self.boxes[i] for i in idx])


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _shape_mask(kind, box, yy, xx):
    x0, y0, x1, y1 = box
    if kind == "square":
        return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if kind == "circle":
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        frac = (yy - y0) / (y1 - y0)
        half = frac * (x1 - x0) / 2
        return (yy >= y0) & (yy < y1) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_sample(spec, rng):
    n = spec.canvas_size
    s = n / 64.0
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img = rng.uniform(70, 110, size=(1, 1, 1)) + rng.normal(0, 4, size=(n, n, 1))
    img = np.repeat(img, 3, axis=2)
    for _ in range(spec.distractors):
        w, h = rng.uniform(4, 14, size=2) * s
        x0, y0 = rng.uniform(0, n - w), rng.uniform(0, n - h)
        m = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        img[m] = rng.uniform(50, 150)
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    classes = rng.choice(spec.num_classes, size=count, replace=False)
    labels = np.zeros(spec.num_classes, dtype=np.uint8)
    placed = []
    for c in sorted(int(c) for c in classes):
        kind, color, size, aspect = spec.vocab[c]
        size = size * s * (1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))
        aspect = aspect * (1 + rng.uniform(-spec.aspect_jitter, spec.aspect_jitter))
        w = min(size * np.sqrt(aspect), n - 1.0)
        h = min(size / np.sqrt(aspect), n - 1.0)
        for _ in range(100):
            x0, y0 = rng.uniform(0, n - w), rng.uniform(0, n - h)
            box = (x0, y0, x0 + w, y0 + h)
            if all(_iou(box, b[1:]) <= spec.max_iou for b in placed):
                break
        else:
            continue
        mask = _shape_mask(kind, box, yy, xx)
        if not mask.any():
            continue
        col = np.array(COLORS[color], dtype=np.float64) + rng.normal(0, 10, size=3)
        img[mask] = col
        labels[c] = 1
        placed.append((c,) + tuple(float(v) for v in box))
    img = img + rng.normal(0, spec.noise_std, size=img.shape)
    return SyntheticSample(np.clip(np.rint(img), 0, 255).astype(np.uint8), labels, placed)


def generate_dataset(spec, count, offset=0):
    """``count`` samples; sample i uses its own seed stream derived from (seed, offset + i)."""
    if count < 1:
        raise ValueError("generate_dataset: count must be >= 1")
    samples = [render_sample(spec, np.random.default_rng([spec.seed, offset + i])) for i in range(count)]
    return Dataset(
        np.stack([smp.image for smp in samples]),
        np.stack([smp.labels for smp in samples]),
        [smp.boxes for smp in samples],
    )


def default_splits(spec=SceneSpec(), n_train=4000, n_test=1000):
    """Train and test sets from disjoint seed streams of the same spec."""
    return generate_dataset(spec, n_train), generate_dataset(spec, n_test, offset=10 ** 6)


def augment(image, rng, crop, flip=None, offset=None):
    """Random crop to ``crop x crop`` then a Bernoulli(0.5) horizontal flip.

    ``flip`` and ``offset`` force the random choices.
    """
    n = image.shape[0]
    if crop > n:
        raise ValueError(f"augment: crop {crop} larger than image {n}")
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, n - crop + 1, size=2))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    oy, ox = offset
    out = image[oy:oy + crop, ox:ox + crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment_sample(sample, rng, crop):
    return SyntheticSample(augment(sample.image, rng, crop), sample.labels.copy(), list(sample.boxes))


def labels_to_hex(labels):
    return format(sum(1 << int(c) for c in np.flatnonzero(labels)), "x")


def hex_to_labels(text, num_classes):
    bits = int(text, 16)
    if bits >> num_classes:
        raise ValueError(f"label bits {text} exceed {num_classes} classes")
    return np.array([(bits >> c) & 1 for c in range(num_classes)], dtype=np.uint8)


def save_dataset(root, ds):
    """``index.tsv`` with (id, hex label bits, file) plus one raster per image."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "index.tsv"), "w") as fh:
        fh.write(f"# num_classes={ds.labels.shape[1]}\n")
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            name = f"img_{i:06d}.rgb"
            write_raster(os.path.join(root, name), img)
            fh.write(f"{i}\t{labels_to_hex(lab)}\t{name}\n")


def load_dataset(root):
    num_classes = None
    images, labels = [], []
    with open(os.path.join(root, "index.tsv")) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# num_classes="):
                num_classes = int(line.split("=", 1)[1])
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or num_classes is None:
                raise ValueError(f"{root}/index.tsv:{lineno}: malformed record")
            labels.append(hex_to_labels(parts[1], num_classes))
            images.append(read_raster(os.path.join(root, parts[2])))
    return Dataset(np.stack(images), np.stack(labels), [[] for _ in images])
