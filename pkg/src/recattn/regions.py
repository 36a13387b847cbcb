"""Anchor regions around a location and bilinear crops of the feature map.

Coordinates are normalized to the feature map: ``x`` runs along the width
axis, ``y`` along the height axis, and ``u in [0, 1]`` maps to the
continuous cell index ``u * (extent - 1)``.  So 0 and 1 sit on the centres
of the first and last cells, and the crop grid is corner-aligned: the first
and last samples fall exactly on the region's edges.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Location:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"location ({self.x}, {self.y}) outside the unit square")


@dataclass(frozen=True)
class Region:
    center: Location
    width: float
    height: float

    @property
    def bounds(self):
        """(x0, y0, x1, y1) in normalized coordinates."""
        cx, cy = self.center.x, self.center.y
        return (cx - self.width / 2, cy - self.height / 2,
                cx + self.width / 2, cy + self.height / 2)


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor areas (normalized units squared), width:height ratios, crop size.

    Defaults are the 80/160/320-of-512 family rescaled to a 64 pixel input
    and the 2:1, 1:1, 1:2 ratios, giving k = 9.
    """

    areas: tuple = ((16 / 64) ** 2, (24 / 64) ** 2, (40 / 64) ** 2)
    ratios: tuple = (2.0, 1.0, 0.5)
    crop_size: int = 5

    def __post_init__(self):
        if not self.areas or not self.ratios:
            raise ValueError("AnchorConfig needs at least one area and one ratio")
        if any(a <= 0 for a in self.areas) or any(r <= 0 for r in self.ratios):
            raise ValueError("anchor areas and ratios must be positive")
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")

    @property
    def k(self):
        return len(self.areas) * len(self.ratios)

    def extents(self):
        """Pre-clip (width, height) per anchor, areas outer, ratios inner."""
        return np.array([(np.sqrt(a * r), np.sqrt(a / r)) for a in self.areas for r in self.ratios])


def single_region_config(cfg=AnchorConfig()):
    """k = 1: the middle area with a 1:1 ratio."""
    return AnchorConfig(areas=(cfg.areas[len(cfg.areas) // 2],), ratios=(1.0,), crop_size=cfg.crop_size)


def clip_box(cx, cy, w, h):
    """Fit a box in the unit square.

    Extents larger than 1 shrink to 1; the centre then moves inward until the
    box fits.  Works elementwise on arrays.
    """
    w = np.minimum(w, 1.0)
    h = np.minimum(h, 1.0)
    cx = np.clip(cx, w / 2, 1.0 - w / 2)
    cy = np.clip(cy, h / 2, 1.0 - h / 2)
    return cx, cy, w, h


def generate_anchors(loc, cfg):
    """The k clipped anchor regions centred on ``loc``."""
    regions = []
    for w, h in cfg.extents():
        cx, cy, cw, chh = clip_box(loc.x, loc.y, w, h)
        regions.append(Region(Location(float(cx), float(cy)), float(cw), float(chh)))
    return regions


def anchor_boxes(locs, cfg):
    """Vectorized :func:`generate_anchors`.

    Args:
        locs: (B, 2) array of (x, y).

    Returns:
        (B, k, 4) array of clipped (cx, cy, w, h).
    """
    locs = np.asarray(locs, dtype=np.float64)
    ext = cfg.extents()
    cx, cy, w, h = clip_box(locs[:, None, 0], locs[:, None, 1], ext[None, :, 0], ext[None, :, 1])
    return np.stack(np.broadcast_arrays(cx, cy, w, h), axis=-1)


def whole_image_region():
    return Region(Location(0.5, 0.5), 1.0, 1.0)


def _axis_weights(lo, hi, n_samples, extent):
    """Bilinear weights along one axis.

    Args:
        lo, hi: (...,) normalized region edges.

    Returns:
        (..., n_samples, extent) interpolation matrix.
    """
    lo = np.asarray(lo, dtype=np.float64)[..., None]
    hi = np.asarray(hi, dtype=np.float64)[..., None]
    if n_samples == 1:
        t = np.full((1,), 0.5)
    else:
        t = np.arange(n_samples) / (n_samples - 1)
    pos = (lo + (hi - lo) * t) * (extent - 1)
    pos = np.clip(pos, 0.0, extent - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, extent - 1)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, extent - 1)
    wts = np.zeros(pos.shape + (extent,))
    np.put_along_axis(wts, i0[..., None], (1.0 - frac)[..., None], axis=-1)
    # add, since i1 == i0 on the last cell
    cur = np.take_along_axis(wts, i1[..., None], axis=-1)
    np.put_along_axis(wts, i1[..., None], cur + frac[..., None], axis=-1)
    return wts


def crop_weights(boxes, height, width, crop_size):
    """Interpolation matrices for a batch of boxes.

    Args:
        boxes: (..., 4) clipped (cx, cy, w, h).

    Returns:
        (..., crop_size * crop_size, height * width) matrix ``W`` such that
        ``W @ F.reshape(H*W, C)`` is the crop laid out row-major (y then x).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("crop: degenerate region with zero width or height")
    wy = _axis_weights(cy - h / 2, cy + h / 2, crop_size, height)  # (..., S, H)
    wx = _axis_weights(cx - w / 2, cx + w / 2, crop_size, width)   # (..., S, W)
    full = wy[..., :, None, :, None] * wx[..., None, :, None, :]    # (..., S, S, H, W)
    lead = full.shape[:-4]
    return full.reshape(lead + (crop_size * crop_size, height * width))


def crop_batch(fmap_tensor, boxes, crop_size):
    """Bilinear crops of many regions per map.

    Args:
        fmap_tensor: Tensor (B, C, H, W).
        boxes: (B, k, 4) clipped boxes.

    Returns:
        Tensor (B, k, C, crop_size, crop_size).  Differentiable in the
        feature values only.
    """
    B, C, H, W = fmap_tensor.shape
    k = boxes.shape[1]
    wts = crop_weights(boxes, H, W, crop_size).reshape(B, k * crop_size * crop_size, H * W)
    f = ad.transpose(ad.reshape(fmap_tensor, (B, C, H * W)), (0, 2, 1))  # (B, HW, C)
    out = ad.matmul(ad.constant(wts), f)  # (B, k*S*S, C)
    out = ad.reshape(out, (B, k, crop_size, crop_size, C))
    return ad.transpose(out, (0, 1, 4, 2, 3))


def crop_bilinear(fmap, region, crop_size):
    """Crop one region from a single (C, H, W) feature map to (C, S, S)."""
    t = fmap.tensor if hasattr(fmap, "tensor") else ad.tensor(fmap)
    if t.ndim != 3:
        raise ValueError(f"crop_bilinear: expected a (C, H, W) map, got {t.shape}")
    box = np.array([[[region.center.x, region.center.y, region.width, region.height]]])
    x0, y0, x1, y1 = region.bounds
    if region.width <= 0 or region.height <= 0 or x1 <= 0 or y1 <= 0 or x0 >= 1 or y0 >= 1:
        raise ValueError(f"crop_bilinear: degenerate or external region {region}")
    out = crop_batch(ad.reshape(t, (1,) + t.shape), box, crop_size)
    return ad.reshape(out, out.shape[2:])
