"""Binary instance masks: run-length codec, mask geometry and boundary F-measure.

Raster masks are 2-D boolean numpy arrays indexed ``[row, col]``.  Runs are
taken in row-major order and always start with a background run, which may
be zero when the first pixel is foreground.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import DataError, check_mask, check_same_shape
from .geometry import BBox


class MalformedRLEError(DataError):
    pass


class EmptyMaskError(DataError):
    pass


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))

    @property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    def decode(self) -> np.ndarray:
        return rle_decode(self)


def rle_encode(mask) -> RleMask:
    m = check_mask(mask)
    flat = m.ravel()
    # positions where the value flips, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(m.shape[0], m.shape[1], tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    if rle.height <= 0 or rle.width <= 0:
        raise MalformedRLEError(f"non-positive dimensions {rle.height}x{rle.width}")
    runs = np.asarray(rle.runs, dtype=np.int64)
    if runs.size == 0 or np.any(runs < 0):
        raise MalformedRLEError("runs must be a non-empty list of non-negative integers")
    total = int(runs.sum())
    if total != rle.height * rle.width:
        raise MalformedRLEError(
            f"runs sum to {total}, expected {rle.height * rle.width} for {rle.height}x{rle.width}"
        )
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(rle.height, rle.width)


def foreground_area(mask) -> int:
    return int(np.count_nonzero(mask))


def mask_iou(a, b) -> float:
    """Jaccard index of two equal-sized masks; two empty masks score 1."""
    a, b = check_mask(a, "a"), check_mask(b, "b")
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_to_bbox(mask) -> BBox:
    m = check_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    cols = np.flatnonzero(m.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def centroid(mask) -> tuple[float, float]:
    """Mean ``(x, y)`` of the set pixels, in pixel-index coordinates."""
    m = check_mask(mask)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise EmptyMaskError("centroid of an empty mask is undefined")
    return float(cols.mean()), float(rows.mean())


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask.

    Pixels outside the frame count as background.
    """
    m = check_mask(mask)
    cross = ndimage.generate_binary_structure(2, 1)
    interior = ndimage.binary_erosion(m, structure=cross, border_value=0)
    return m & ~interior


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def default_tolerance(height: int, width: int) -> int:
    return max(1, int(round(0.008 * float(np.hypot(height, width)))))


def boundary_f(pred, gt, tolerance: int | None = None) -> float:
    """Boundary F-measure between two masks.

    Boundaries are matched within a Euclidean disc of ``tolerance`` pixels
    (default: 0.8% of the image diagonal, at least 1).
    """
    pred, gt = check_mask(pred, "pred"), check_mask(gt, "gt")
    check_same_shape(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(*gt.shape)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pb, gb = boundary_map(pred), boundary_map(gt)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    se = disk(tolerance)
    gd = ndimage.binary_dilation(gb, structure=se)
    pd = ndimage.binary_dilation(pb, structure=se)
    precision = np.count_nonzero(pb & gd) / n_p
    recall = np.count_nonzero(gb & pd) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
