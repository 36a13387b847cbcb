"""Tiny convolutional feature extractor and the feature-map file format."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class BackboneConfig:
    """Shape of the conv stack.

    Three stride-2 3x3 stages with tanh give a total stride of 8, so a 64x64
    input produces an 8x8 feature map with ``out_channels`` channels.
    """

    input_size: int = 64
    channels_per_stage: tuple = (16, 32, 32)
    kernel_size: int = 3
    stride_per_stage: int = 2

    @property
    def stride_total(self):
        return self.stride_per_stage ** len(self.channels_per_stage)

    @property
    def out_channels(self):
        return self.channels_per_stage[-1]

    def feature_size(self, input_size=None):
        n = self.input_size if input_size is None else input_size
        if n % self.stride_total:
            raise ValueError(f"input size {n} not divisible by total stride {self.stride_total}")
        return n // self.stride_total


@dataclass
class FeatureMap:
    """Backbone output for one or more images.

    ``tensor`` has shape (C, H', W') for a single map or (B, C, H', W') for a
    batch; ``scale`` is input pixels per feature cell.
    """

    tensor: ad.Tensor
    scale: float = 8.0

    @property
    def channels(self):
        return self.tensor.shape[-3]

    @property
    def height(self):
        return self.tensor.shape[-2]

    @property
    def width(self):
        return self.tensor.shape[-1]


def init_backbone(cfg, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    c_in = 3
    for i, c_out in enumerate(cfg.channels_per_stage):
        fan_in = c_in * cfg.kernel_size ** 2
        s = 1.0 / np.sqrt(fan_in)
        params[f"backbone.conv{i}.w"] = ad.parameter(
            rng.uniform(-s, s, size=(c_out, c_in, cfg.kernel_size, cfg.kernel_size)))
        params[f"backbone.conv{i}.b"] = ad.parameter(np.zeros(c_out))
        c_in = c_out
    return params


def extract_features(images, params, cfg):
    """Run the conv stack.

    Args:
        images: (N, N, 3) or (B, N, N, 3) array/Tensor with values in [0, 1].
        params: dict from :func:`init_backbone`.
        cfg: BackboneConfig.

    Returns:
        FeatureMap whose tensor is (C, N/8, N/8) or (B, C, N/8, N/8).
    """
    x = ad.tensor(images)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"extract_features: expected (B, N, N, 3) images, got {x.shape}")
    n = x.shape[1]
    cfg.feature_size(n)
    h = ad.transpose(x, (0, 3, 1, 2))
    pad = cfg.kernel_size // 2
    for i in range(len(cfg.channels_per_stage)):
        h = ad.conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                      stride=cfg.stride_per_stage, padding=pad)
        h = ad.tanh(h)
    if single:
        h = ad.reshape(h, h.shape[1:])
    return FeatureMap(h, scale=float(n) / h.shape[-1])


def save_feature_map(path, fmap):
    ad.save_tensors(path, {
        "features": fmap.tensor.data,
        "meta.scale": np.array([fmap.scale]),
    })


def load_feature_maps(path, input_size=None):
    """Load a FeatureMap saved by :func:`save_feature_map`.

    If ``input_size`` is given the stored scale must equal
    ``input_size / width``.
    """
    blob = ad.load_tensors(path)
    for key in ("features", "meta.scale"):
        if key not in blob:
            raise ad.BlobError(f"missing entry {key!r}", 0)
    feats, scale = blob["features"], blob["meta.scale"]
    if feats.ndim not in (3, 4) or scale.shape != (1,):
        raise ad.BlobError(f"bad shapes: features {feats.shape}, scale {scale.shape}", 0)
    scale = float(scale[0])
    if not np.isfinite(scale) or scale <= 0:
        raise ad.BlobError(f"invalid scale {scale}", 0)
    # scale must turn the extents back into an integral square input size
    n_h, n_w = scale * feats.shape[-2], scale * feats.shape[-1]
    if feats.shape[-1] != feats.shape[-2] or n_h != round(n_h) or n_w != round(n_w):
        raise ad.BlobError(f"scale {scale} inconsistent with extents {feats.shape[-2:]}", 0)
    if input_size is not None and n_w != input_size:
        raise ad.BlobError(f"scale {scale} inconsistent with input size {input_size}", 0)
    return FeatureMap(ad.constant(feats), scale=scale)


def read_raster(path):
    """Read an 8-bit RGB raster: u32 width, u32 height, then row-major RGB bytes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated header")
    w, h = np.frombuffer(buf[:8], dtype="<u4")
    if len(buf) != 8 + int(w) * int(h) * 3:
        raise ValueError(f"{path}: expected {int(w) * int(h) * 3} pixel bytes, found {len(buf) - 8}")
    return np.frombuffer(buf[8:], dtype=np.uint8).reshape(int(h), int(w), 3).copy()


def write_raster(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_raster: expected (H, W, 3) uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(image).tobytes())
