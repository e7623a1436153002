"""Seeded image transforms: rotations, crops, bilinear resize, jigsaw patches
and the region confusion mechanism (RCM) with exact location ground truth.

Images are ``H×W`` or ``H×W×C`` numpy arrays. Randomised transforms take an
explicit ``np.random.Generator``; use :func:`stream` to derive one per
``(seed, epoch, sample id, purpose)`` so batch order never changes results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Purpose",
    "stream",
    "rotate90",
    "resize",
    "center_crop",
    "random_crop",
    "JigsawPermutation",
    "rcm_permutation",
    "apply_rcm",
    "reassemble",
    "location_targets",
    "PatchSet",
    "extract_jigsaw_patches",
]


class Purpose:
    SHUFFLE = 1
    CROP = 2
    RCM = 3
    JIGSAW = 4
    DB = 5
    NEGATIVES = 6
    BANK_INIT = 7


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def rotate90(image: np.ndarray, r: int) -> np.ndarray:
    """Rotate counter-clockwise by ``90·r`` degrees, ``r ∈ {0,1,2,3}``."""
    if r not in (0, 1, 2, 3):
        raise ValueError(f"rotation label must be in 0..3, got {r}")
    if r % 2 and image.shape[0] != image.shape[1]:
        raise ValueError("odd quarter turns need a square image")
    return np.ascontiguousarray(np.rot90(image, r, axes=(0, 1)))


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    if n_in == 1:
        zeros = np.zeros(n_out, dtype=np.int64)
        return zeros, zeros, np.zeros(n_out)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    return i0, i0 + 1, pos - i0


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize: output extents must be positive")
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    img = image.astype(np.float64)
    r0, r1, tr = _axis_weights(h, out_h)
    c0, c1, tc = _axis_weights(w, out_w)
    extra = (None,) * (img.ndim - 2)
    top, bottom = img[r0], img[r1]
    tr = tr[(slice(None), None, *extra)]
    rows = top + tr * (bottom - top)
    left, right = rows[:, c0], rows[:, c1]
    tc = tc[(None, slice(None), *extra)]
    return (left + tc * (right - left)).astype(image.dtype)


def _check_crop(image: np.ndarray, out_h: int, out_w: int) -> tuple[int, int]:
    h, w = image.shape[:2]
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"crop {out_h}x{out_w} does not fit image {h}x{w}")
    return h, w


def center_crop(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = _check_crop(image, out_h, out_w)
    top, left = (h - out_h) // 2, (w - out_w) // 2
    return image[top:top + out_h, left:left + out_w].copy()


def random_crop(image: np.ndarray, out_h: int, out_w: int, rng: np.random.Generator) -> np.ndarray:
    h, w = _check_crop(image, out_h, out_w)
    top = int(rng.integers(0, h - out_h + 1))
    left = int(rng.integers(0, w - out_w + 1))
    return image[top:top + out_h, left:left + out_w].copy()


# ---------------------------------------------------------------------------
# region confusion mechanism
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JigsawPermutation:
    """A constrained k×k cell shuffle.

    Indices are 0-based. ``row_perms[j][p]`` is the source column of the cell
    that lands at column ``p`` of row ``j``; ``col_perms[i][p]`` is the source
    row (after the row shuffle) of the cell landing at row ``p`` of column
    ``i``. ``origin_of[r, c]`` is the original ``(row, col)`` of the cell now
    at ``(r, c)``.
    """

    k: int
    D: int
    row_perms: np.ndarray
    col_perms: np.ndarray
    origin_of: np.ndarray

    @classmethod
    def identity(cls, k: int) -> "JigsawPermutation":
        ident = np.tile(np.arange(k), (k, 1))
        return cls(k, 0, ident, ident.copy(), _compose(ident, ident))


def _compose(row_perms: np.ndarray, col_perms: np.ndarray) -> np.ndarray:
    k = row_perms.shape[0]
    origin = np.empty((k, k, 2), dtype=np.int64)
    for i in range(k):  # destination column
        for p in range(k):  # destination row
            r = col_perms[i][p]
            origin[p, i] = (r, row_perms[r][i])
    return origin


def _sorted_perm(k: int, D: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.integers(-D, D + 1, size=k)
    return np.argsort(np.arange(k) + d, kind="stable")


def rcm_permutation(k: int, D: int, rng: np.random.Generator) -> JigsawPermutation:
    """Draw per-row then per-column shuffles with offsets ``d ~ U{-D..D}``."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if not 0 <= D < k:
        raise ValueError(f"need 0 <= D < k, got D={D}, k={k}")
    row_perms = np.stack([_sorted_perm(k, D, rng) for _ in range(k)])
    col_perms = np.stack([_sorted_perm(k, D, rng) for _ in range(k)])
    return JigsawPermutation(k, D, row_perms, col_perms, _compose(row_perms, col_perms))


def _cells(image: np.ndarray, k: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} is not divisible into {k}x{k} cells")
    ch, cw = h // k, w // k
    rest = image.shape[2:]
    return image.reshape(k, ch, k, cw, *rest).swapaxes(1, 2)  # k, k, ch, cw, ...


def _uncells(cells: np.ndarray) -> np.ndarray:
    k, _, ch, cw = cells.shape[:4]
    return np.ascontiguousarray(cells.swapaxes(1, 2).reshape(k * ch, k * cw, *cells.shape[4:]))


def apply_rcm(image: np.ndarray, perm: JigsawPermutation) -> tuple[np.ndarray, JigsawPermutation]:
    cells = _cells(image, perm.k)
    moved = cells[perm.origin_of[..., 0], perm.origin_of[..., 1]]
    return _uncells(moved), perm


def reassemble(deconstructed: np.ndarray, perm: JigsawPermutation) -> np.ndarray:
    """Invert :func:`apply_rcm` using the tracked origin of every cell."""
    cells = _cells(deconstructed, perm.k)
    out = np.empty_like(cells)
    out[perm.origin_of[..., 0], perm.origin_of[..., 1]] = cells
    return _uncells(out)


def location_targets(perm: JigsawPermutation) -> np.ndarray:
    """Original (row, col) of each destination cell, scaled to [-1, 1]."""
    return 2.0 * perm.origin_of / (perm.k - 1) - 1.0


# ---------------------------------------------------------------------------
# jigsaw patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatchSet:
    patches: np.ndarray  # n × p × p (× C)
    grid: int
    source_cells: list[tuple[int, int]]


def extract_jigsaw_patches(image: np.ndarray, resize_dim: int, optional_center_crop: int | None,
                           grid: int, patch_size: int, rng: np.random.Generator) -> PatchSet:
    """Resize, optionally centre-crop, then take one random square patch per grid cell."""
    if grid * grid not in (4, 9):
        raise ValueError(f"grid must give 4 or 9 patches, got {grid}x{grid}")
    img = resize(image, resize_dim, resize_dim)
    if optional_center_crop:
        img = center_crop(img, optional_center_crop, optional_center_crop)
    side = img.shape[0]
    cell = side // grid
    if patch_size > cell or patch_size < 1:
        raise ValueError(f"patch size {patch_size} larger than cell {cell}")
    patches, cells = [], []
    for i in range(grid):
        for j in range(grid):
            dy = int(rng.integers(0, cell - patch_size + 1))
            dx = int(rng.integers(0, cell - patch_size + 1))
            y, x = i * cell + dy, j * cell + dx
            patches.append(img[y:y + patch_size, x:x + patch_size])
            cells.append((i, j))
    return PatchSet(np.stack(patches), grid, cells)
