"""Diversification block: random suppression of CAM peaks and CAM patches.

Masks are computed from activation values (no gradient); suppression
multiplies the selected cells by ``alpha`` so gradients still flow through
the scaled activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["DbConfig", "peak_mask", "patch_mask", "suppression_mask", "apply_suppression", "diversify"]


@dataclass(frozen=True)
class DbConfig:
    p_peak: float = 0.2
    p_patch: float = 0.2
    patch_k: int = 2
    alpha: float = 0.5
    train_only: bool = True

    def __post_init__(self):
        for name in ("p_peak", "p_patch", "alpha"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.patch_k < 1:
            raise ValueError("patch_k must be positive")


def _peaks(cams: np.ndarray) -> np.ndarray:
    c, h, w = cams.shape
    flat = cams.reshape(c, -1)
    peaks = np.zeros_like(flat, dtype=bool)
    peaks[np.arange(c), flat.argmax(axis=1)] = True  # first maximum in row-major order
    return peaks.reshape(c, h, w)


def peak_mask(cams: np.ndarray, p_peak: float, rng: np.random.Generator) -> np.ndarray:
    """Each class's argmax cell, kept with probability ``p_peak``."""
    cams = np.asarray(cams)
    r = rng.random(cams.shape[0]) < p_peak
    return (_peaks(cams) & r[:, None, None]).astype(np.uint8)


def patch_mask(cams: np.ndarray, patch_k: int, p_patch: float, rng: np.random.Generator) -> np.ndarray:
    """K×K blocks switched on with probability ``p_patch``; class peaks are left out."""
    cams = np.asarray(cams)
    c, h, w = cams.shape
    if h % patch_k or w % patch_k:
        raise ValueError(f"patch size {patch_k} does not divide CAM size {h}x{w}")
    blocks = rng.random((c, h // patch_k, w // patch_k)) < p_patch
    mask = np.repeat(np.repeat(blocks, patch_k, axis=1), patch_k, axis=2)
    mask[_peaks(cams)] = False
    return mask.astype(np.uint8)


def suppression_mask(cams: np.ndarray, cfg: DbConfig, rng: np.random.Generator) -> np.ndarray:
    """Combined peak + patch mask, clamped to {0, 1}."""
    m = peak_mask(cams, cfg.p_peak, rng).astype(np.int64) + patch_mask(cams, cfg.patch_k, cfg.p_patch, rng)
    return np.minimum(m, 1).astype(np.uint8)


def apply_suppression(cams, mask, alpha: float):
    """Scale masked activations by ``alpha``; works on arrays and tensors."""
    mask = np.asarray(mask)
    if mask.shape != tuple(cams.shape):
        raise ValueError(f"mask shape {mask.shape} does not match CAMs {tuple(cams.shape)}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    dtype = cams.data.dtype if isinstance(cams, Tensor) else np.asarray(cams).dtype
    factor = np.where(mask == 1, dtype.type(alpha), dtype.type(1))
    if isinstance(cams, Tensor):
        return T.mul(cams, factor)
    return np.asarray(cams) * factor


def diversify(cams: Tensor, cfg: DbConfig, rngs, training: bool = True) -> Tensor:
    """Apply the block to a ``B×C×H×W`` batch with one stream per sample."""
    if cfg.train_only and not training:
        return cams
    masks = np.stack([suppression_mask(cams.data[b], cfg, rng) for b, rng in enumerate(rngs)])
    return apply_suppression(cams, masks, cfg.alpha)
