"""Grad-CAM heatmaps, their export as pixmaps, and a localization score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import Dataset, write_graymap, write_pixmap
from .tensor import Tensor
from .transforms import resize

__all__ = ["Heatmap", "grad_cam", "export_heatmap", "upsample", "localization_rate", "rate_from_heatmaps"]


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # h×w in [0, 1]
    class_index: int
    sample_id: int = -1


def _to_batch(image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3 and x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.transpose(2, 0, 1)  # H×W×3 sample image
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"grad_cam expects a single image, got shape {x.shape}")
    return np.ascontiguousarray(x, dtype=T.get_default_dtype())


def grad_cam(model, image, class_index: int, sample_id: int = -1) -> Heatmap:
    """Gradient-weighted class activation map of ``class_index`` for one image.

    ``model`` needs ``features(x)`` returning ``1×C×h×w`` and
    ``class_scores(features)`` returning ``1×N``. ``image`` may be ``H×W×3``
    or ``3×H×W``.
    """
    with T.no_grad():
        feats = model.features(_to_batch(image))
    leaf = Tensor(feats.data.copy(), requires_grad=True)
    scores = model.class_scores(leaf)
    n = scores.shape[-1]
    if not 0 <= class_index < n:
        raise ValueError(f"class index {class_index} out of range for {n} classes")
    T.reshape(scores, (-1,))[class_index].backward()
    grad = leaf.grad[0].astype(np.float64)
    fmap = leaf.data[0].astype(np.float64)
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, fmap, axes=1), 0.0)
    peak = cam.max()
    values = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(values, int(class_index), int(sample_id))


def upsample(heatmap: Heatmap, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the heatmap to image resolution."""
    return np.clip(resize(heatmap.values, height, width), 0.0, 1.0)


def export_heatmap(heatmap: Heatmap, base_image: np.ndarray, path_gray, path_overlay) -> None:
    """Write the upsampled map as a graymap and a red overlay on ``base_image`` as a pixmap."""
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim != 3 or base.shape[2] != 3:
        raise ValueError("base image must be H×W×3")
    up = upsample(heatmap, base.shape[0], base.shape[1])
    write_graymap(up, path_gray)
    red = np.zeros_like(base)
    red[..., 0] = up
    write_pixmap(0.5 * base + 0.5 * red, path_overlay)


def rate_from_heatmaps(maps: list[np.ndarray], boxes, image_hw: tuple[int, int]) -> float:
    """Percentage of maps whose upsampled argmax falls inside its ``(r0, c0, r1, c1)`` box."""
    if len(maps) == 0:
        raise ValueError("localization needs at least one sample")
    h, w = image_hw
    hits = 0
    for values, box in zip(maps, boxes, strict=True):
        if box is None:
            raise ValueError("sample has no glyph_box")
        up = resize(np.asarray(values, dtype=np.float64), h, w)
        r, c = np.unravel_index(int(np.argmax(up)), up.shape)
        r0, c0, r1, c1 = box
        hits += r0 <= r < r1 and c0 <= c < c1
    return 100.0 * int(hits) / len(maps)


def localization_rate(model, test: Dataset, class_index=None) -> float:
    """Share of test samples (percent) whose Grad-CAM peak lies on the glyph.

    The map is taken for the true label unless ``class_index`` maps a sample
    to another class.
    """
    if len(test) == 0:
        raise ValueError("localization needs a non-empty test set")
    maps, boxes = [], []
    for s in test.samples:
        if s.glyph_box is None:
            raise ValueError(f"sample {s.id} has no glyph_box")
        c = s.label if class_index is None else class_index(s)
        maps.append(grad_cam(model, s.image, c, s.id).values)
        boxes.append(s.glyph_box)
    return rate_from_heatmaps(maps, boxes, test.samples[0].image.shape[:2])
