"""Synthetic fine-grained data, pixmap I/O and label-fraction splits.

Every synthetic class shares one centred body silhouette; classes differ only
in a small glyph (shape × colour) painted at a random spot on the body. The
glyph is the single discriminative part, which makes the data "fine-grained"
by construction and gives a ground-truth box for localisation checks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PixmapError",
    "Sample",
    "Dataset",
    "SplitSpec",
    "generate_synthetic",
    "load_directory",
    "save_directory",
    "split_semi_supervised",
    "write_pixmap",
    "read_pixmap",
    "write_graymap",
    "read_graymap",
]

TRAIN, TEST = 0, 1
MAX_GLYPH_AREA = 0.05
MANIFEST = "manifest.txt"


class PixmapError(ValueError):
    """Malformed or unsupported portable pixmap."""


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # H×W×3 float32 in [0, 1]
    label: int
    id: int
    glyph_box: tuple[int, int, int, int] | None = None  # (row0, col0, row1, col1), end-exclusive


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"sample {s.id}: label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


@dataclass(frozen=True)
class SplitSpec:
    label_fraction: float = 1.0
    seed: int = 0


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_SHAPES = ("plus", "cross", "ring", "bars", "triangle")


def _shape_mask(kind: str, side: int) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    if kind == "plus":
        return (np.abs(u) < 0.4) | (np.abs(v) < 0.4)
    if kind == "cross":
        return np.abs(np.abs(u) - np.abs(v)) < 0.45
    if kind == "ring":
        return np.maximum(np.abs(u), np.abs(v)) > 0.45
    if kind == "bars":
        return np.abs(v) > 0.45
    if kind == "triangle":
        return v > 2 * np.abs(u) - 1.1
    raise ValueError(kind)


def _palette(n: int) -> np.ndarray:
    # saturated, well-separated hues
    hues = np.arange(n) / n
    rgb = np.stack([np.clip(np.abs((hues * 6 + off) % 6 - 3) - 1, 0, 1) for off in (0, 4, 2)], axis=1)
    return 0.15 + 0.8 * rgb


def _class_glyph(label: int, num_classes: int) -> tuple[str, np.ndarray]:
    n_colors = math.ceil(num_classes / len(_SHAPES))
    return _SHAPES[label % len(_SHAPES)], _palette(n_colors)[label // len(_SHAPES)]


def _render(label: int, num_classes: int, size: int, rng: np.random.Generator):
    S = size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    # background: random tint plus a smooth gradient
    tint = rng.uniform(0.15, 0.75, size=3)
    grad_dir = rng.uniform(-1, 1, size=2)
    ramp = (grad_dir[0] * (yy / S - 0.5) + grad_dir[1] * (xx / S - 0.5)) * 0.3
    img = tint[None, None, :] + ramp[..., None]

    # body: ellipse near the centre with a head disc on a random side
    scale = rng.uniform(0.85, 1.15)
    cy = S / 2 + rng.uniform(-0.08, 0.08) * S
    cx = S / 2 + rng.uniform(-0.08, 0.08) * S
    ry, rx = 0.24 * S * scale, 0.33 * S * scale
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    side = rng.choice([-1, 1])
    hy, hx, hr = cy - 0.55 * ry, cx + side * 0.85 * rx, 0.16 * S * scale
    head = (yy - hy) ** 2 + (xx - hx) ** 2 <= hr ** 2
    body_color = np.array([0.45, 0.35, 0.25]) + rng.uniform(-0.12, 0.12, size=3)
    img[body | head] = body_color

    # class glyph somewhere on the body
    shape, color = _class_glyph(label, num_classes)
    max_side = int(math.floor(math.sqrt(MAX_GLYPH_AREA * 0.98) * S))
    g = int(np.clip(round(0.16 * S * rng.uniform(0.9, 1.2)), 3, max_side))
    # keep the whole glyph inside a shrunken body ellipse
    for _ in range(100):
        r0 = int(rng.integers(0, S - g + 1))
        c0 = int(rng.integers(0, S - g + 1))
        gy, gx = r0 + g / 2, c0 + g / 2
        if ((gy - cy) / max(ry - g * 0.75, 1)) ** 2 + ((gx - cx) / max(rx - g * 0.75, 1)) ** 2 <= 1:
            break
    else:
        r0 = int(np.clip(round(cy - g / 2), 0, S - g))
        c0 = int(np.clip(round(cx - g / 2), 0, S - g))
    mask = _shape_mask(shape, g)
    glyph_color = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0, 1)
    patch = img[r0:r0 + g, c0:c0 + g]
    patch[mask] = glyph_color

    img = img + rng.normal(0, 0.03, size=img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, (r0, c0, r0 + g, c0 + g)


def _sample_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


def generate_synthetic(num_classes: int = 20, per_class_train: int = 100, per_class_test: int = 50,
                       image_size: int = 32, seed: int = 0, rcm_k: int = 4) -> tuple[Dataset, Dataset]:
    """Build a (train, test) pair of synthetic fine-grained datasets.

    Each sample draws from its own stream keyed by ``(seed, split, index)``,
    so the output does not depend on generation order.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class_train < 1 or per_class_test < 0:
        raise ValueError("per-class counts must be positive")
    if image_size < 8 or image_size % rcm_k or image_size % 4:
        raise ValueError(f"image_size {image_size} must be >= 8 and divisible by 4 and by k={rcm_k}")

    def build(split: int, per_class: int, tag: str) -> Dataset:
        samples = []
        for index in range(num_classes * per_class):
            label = index // per_class
            img, box = _render(label, num_classes, image_size, _sample_rng(seed, split, index))
            samples.append(Sample(img, label, index, box))
        return Dataset(samples, num_classes, tag)

    return build(TRAIN, per_class_train, "train"), build(TEST, per_class_test, "test")


# ---------------------------------------------------------------------------
# semi-supervised split
# ---------------------------------------------------------------------------

def split_semi_supervised(train: Dataset, spec: SplitSpec) -> Dataset:
    """Stratified subset keeping max(1, round(fraction · count)) per class."""
    f = spec.label_fraction
    if not 0 < f <= 1:
        raise ValueError(f"label fraction must be in (0, 1], got {f}")
    if f == 1:
        return Dataset(list(train.samples), train.num_classes, train.split_tag)
    labels = train.labels
    keep = np.zeros(len(train), dtype=bool)
    for c in range(train.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        n = max(1, int(math.floor(f * idx.size + 0.5)))
        rng = np.random.default_rng([spec.seed, c])
        keep[rng.permutation(idx)[:n]] = True
    return Dataset([s for s, k in zip(train.samples, keep) if k], train.num_classes, train.split_tag)


# ---------------------------------------------------------------------------
# portable pixmap / graymap
# ---------------------------------------------------------------------------

def _quantize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(v * 255 + 0.5).astype(np.uint8)


def write_pixmap(image: np.ndarray, path) -> None:
    """Write an H×W×3 image in [0,1] as binary P6 with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def write_graymap(image: np.ndarray, path) -> None:
    """Write an H×W grid in [0,1] as binary P5 with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected H×W grid, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def _parse_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PixmapError("malformed pixmap header")
        tokens.append(buf[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise PixmapError(f"unsupported pixmap magic {tokens[0]!r}")
    pos += 1  # single whitespace before raster
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PixmapError("malformed pixmap header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise PixmapError(f"malformed pixmap header (w={w}, h={h}, maxval={maxval})")
    return tokens[0], w, h, maxval, pos


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    kind, w, h, _, pos = _parse_header(buf)
    if kind != magic:
        raise PixmapError(f"unsupported pixmap {kind.decode()} (expected {magic.decode()})")
    body = buf[pos:pos + w * h * channels]
    if len(body) != w * h * channels:
        raise PixmapError("truncated pixmap raster")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float32) / 255
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_pixmap(path) -> np.ndarray:
    """Read a binary P6 pixmap into an H×W×3 float32 array in [0,1]."""
    return _read(path, b"P6", 3)


def read_graymap(path) -> np.ndarray:
    return _read(path, b"P5", 1)


# ---------------------------------------------------------------------------
# directory layout: <root>/class_<k>/*.ppm (+ optional manifest.txt)
# ---------------------------------------------------------------------------

def _class_dirname(label: int, num_classes: int) -> str:
    return f"class_{label:0{len(str(num_classes - 1))}d}"


def save_directory(dataset: Dataset, root) -> None:
    """Write a dataset as a pixmap tree with a line-oriented manifest.

    Manifest columns: ``id label row0 col0 row1 col1 relpath`` (box fields
    are ``-`` when absent).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# id label row0 col0 row1 col1 path"]
    for s in dataset.samples:
        sub = _class_dirname(s.label, dataset.num_classes)
        (root / sub).mkdir(exist_ok=True)
        rel = f"{sub}/{s.id:06d}.ppm"
        write_pixmap(s.image, root / rel)
        box = " ".join(map(str, s.glyph_box)) if s.glyph_box else "- - - -"
        lines.append(f"{s.id} {s.label} {box} {rel}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def _read_manifest(root: Path) -> dict[str, tuple[int, tuple[int, int, int, int] | None]]:
    entries = {}
    path = root / MANIFEST
    if not path.exists():
        return entries
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"malformed manifest line: {line!r}")
        box = None if parts[2] == "-" else tuple(int(p) for p in parts[2:6])
        entries[parts[6]] = (int(parts[0]), box)
    return entries


def load_directory(path, split_tag: str = "train") -> Dataset:
    """Load ``<root>/class_<k>/*.ppm``; labels follow sorted directory names."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {root}")
    class_dirs = sorted(d for d in os.listdir(root) if d.startswith("class_") and (root / d).is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class_<k> directories")
    manifest = _read_manifest(root)
    samples = []
    next_id = 0
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in os.listdir(root / d) if f.endswith(".ppm"))
        if not files:
            raise ValueError(f"{root / d}: empty class directory")
        for f in files:
            rel = f"{d}/{f}"
            image = read_pixmap(root / rel)
            sid, box = manifest.get(rel, (next_id, None))
            samples.append(Sample(image, label, sid, box))
            next_id = max(next_id, sid) + 1
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{root}: duplicate sample ids")
    return Dataset(samples, len(class_dirs), split_tag)
