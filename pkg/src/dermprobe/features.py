"""Turn decoder activations into probe-ready features.

Segmentation path: bilinear-upsample each selected block to the target
resolution and concatenate along channels (ascending block index), giving a
per-pixel feature map.

Classification path: a deterministic pooling cascade reduces one block's
activation to exactly 512 values. The cascade rule is normative for this
package:

  Stage 1: apply 2x2/stride-2 spatial max pooling p times, where p is the
  largest integer with C * floor(H / 2^p) * floor(W / 2^p) >= 512 and
  floor(H / 2^p) >= 1.

  Stage 2: flatten channel-major (c, then y, then x) to length L, apply a
  1-D max pool with kernel = stride = floor(L / 512), and truncate to the
  first 512 entries.

Bilinear upsampling uses the align-corners=false, half-pixel-centers
convention throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import backbone as bb
from .errors import ActivationTooSmallError, ParameterError

POOLED_SIZE = 512


@dataclass(frozen=True)
class PixelFeatureMap:
    """Per-pixel features at the target output resolution."""

    data: np.ndarray  # (H, W, D) float32
    provenance: tuple[bb.BlockSpec, ...]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ClassificationVector:
    """Exactly 512 pooled values from one decoder block."""

    values: np.ndarray  # (512,) float32
    provenance: bb.BlockSpec

    def __post_init__(self):
        if self.values.shape != (POOLED_SIZE,):
            raise ParameterError(f"classification vector must have shape (512,), got {self.values.shape}")


def upsample_bilinear(activation: bb.DecoderActivation, out_resolution: int) -> np.ndarray:
    """Upsample an activation to (C, out, out); identity when already there."""
    c, h, w = activation.data.shape
    if out_resolution < max(h, w):
        raise ParameterError(
            f"out_resolution {out_resolution} would downsample a {h}x{w} activation"
        )
    if out_resolution == h == w:
        return activation.data.copy()
    x = torch.from_numpy(activation.data.astype(np.float64))[None]
    up = F.interpolate(x, size=(out_resolution, out_resolution), mode="bilinear", align_corners=False)
    return up[0].numpy().astype(np.float32)


def concat_features(items: Sequence[tuple[bb.BlockSpec, np.ndarray]]) -> PixelFeatureMap:
    """Concatenate upsampled blocks (ascending block index) into one map."""
    if not items:
        raise ParameterError("need at least one upsampled block")
    items = sorted(items, key=lambda it: it[0].block_index)
    sizes = {arr.shape[1:] for _, arr in items}
    if len(sizes) != 1:
        raise ParameterError(f"all upsampled blocks must share a spatial size, got {sorted(sizes)}")
    stacked = np.concatenate([arr for _, arr in items], axis=0)
    data = np.ascontiguousarray(np.transpose(stacked, (1, 2, 0)).astype(np.float32))
    return PixelFeatureMap(data=data, provenance=tuple(spec for spec, _ in items))


def pool_to_512(activation: bb.DecoderActivation) -> ClassificationVector:
    """Reduce an activation to exactly 512 values via the pooling cascade."""
    data = activation.data
    c, h, w = data.shape
    if c * h * w < POOLED_SIZE:
        raise ActivationTooSmallError(
            f"activation has {c * h * w} elements, need at least {POOLED_SIZE}"
        )
    p = 0
    while (h >> (p + 1)) >= 1 and c * (h >> (p + 1)) * (w >> (p + 1)) >= POOLED_SIZE:
        p += 1
    x = data
    for _ in range(p):
        hh, ww = x.shape[1] // 2, x.shape[2] // 2
        x = x[:, : hh * 2, : ww * 2].reshape(c, hh, 2, ww, 2).max(axis=(2, 4))
    flat = x.reshape(-1)  # channel-major: c, then y, then x
    kernel = flat.size // POOLED_SIZE
    pooled = flat[: (flat.size // kernel) * kernel].reshape(-1, kernel).max(axis=1)
    return ClassificationVector(
        values=pooled[:POOLED_SIZE].astype(np.float32), provenance=activation.spec
    )


def segmentation_features(
    backbone: bb.FrozenBackbone,
    x0: np.ndarray,
    blocks: Sequence[bb.BlockSpec],
    epsilon_seed: int,
    out_resolution: int | None = None,
) -> PixelFeatureMap:
    """Collect, upsample, and concatenate the given blocks for one image."""
    if out_resolution is None:
        out_resolution = backbone.descriptor.input_resolution
    acts = bb.collect_activations(backbone, x0, blocks, epsilon_seed)
    return concat_features([(a.spec, upsample_bilinear(a, out_resolution)) for a in acts])


def classification_vector(
    backbone: bb.FrozenBackbone,
    x0: np.ndarray,
    block: bb.BlockSpec,
    epsilon_seed: int,
) -> ClassificationVector:
    """Collect one block and pool it to the 512-entry classifier input."""
    (act,) = bb.collect_activations(backbone, x0, [block], epsilon_seed)
    return pool_to_512(act)
