"""Multi-scale feature pyramids.

The built-in extractor summarises each stride x stride cell of the image
with an 8-dimensional intensity/gradient descriptor. Deep features
computed elsewhere can be imported through the feature file instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError

if TYPE_CHECKING:
    from .dataset_io import GrayImage

STAT_DIM = 8


@dataclass(frozen=True)
class PyramidConfig:
    strides: tuple[int, ...] = (8, 16, 32)
    image_size: int = 320
    dims: tuple[int, ...] = field(default=())

    def __post_init__(self):
        strides = tuple(int(s) for s in self.strides)
        object.__setattr__(self, "strides", strides)
        dims = tuple(int(d) for d in self.dims) or (STAT_DIM,) * len(strides)
        object.__setattr__(self, "dims", dims)
        if len(strides) < 1:
            raise ConfigError("pyramid needs at least one scale")
        if any(b <= a for a, b in zip(strides, strides[1:])) or strides[0] < 1:
            raise ConfigError(f"strides must be positive and strictly increasing, got {strides}")
        if len(dims) != len(strides):
            raise ConfigError(f"{len(strides)} strides but {len(dims)} descriptor dims")
        if any(d < 2 for d in dims):
            raise ConfigError("descriptor dimensionality must be at least 2")
        for s in strides:
            if self.image_size % s:
                raise ConfigError(f"stride {s} does not divide image size {self.image_size}")

    @property
    def K(self) -> int:
        return len(self.strides)

    def shapes(self) -> list[tuple[int, int, int]]:
        n = self.image_size
        return [(n // s, n // s, d) for s, d in zip(self.strides, self.dims)]


class FeaturePyramid:
    """K feature maps, scale k shaped (H_k, W_k, D_k)."""

    def __init__(self, scales: Sequence[np.ndarray]):
        self.scales = [np.asarray(s) for s in scales]
        for s in self.scales:
            if s.ndim != 3:
                raise ConfigError(f"feature maps must be 3-D (H, W, D), got shape {s.shape}")
            if not np.all(np.isfinite(s)):
                raise ConfigError("feature maps contain non-finite values")

    @property
    def K(self) -> int:
        return len(self.scales)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(s.shape) for s in self.scales]

    def __eq__(self, other):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return self.shapes == other.shapes and all(np.array_equal(a, b) for a, b in zip(self.scales, other.scales))

    def __repr__(self):
        return f"FeaturePyramid(shapes={self.shapes})"


def orientation_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Unsigned gradient orientation in 4 bins centred on 0, 45, 90, 135 degrees.

    Bin 0 holds horizontal gradients (a vertical edge), bin 2 vertical ones.
    """
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    return np.floor((theta + np.pi / 8) / (np.pi / 4)).astype(int) % 4


def _cell_view(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // s, s, w // s, s).swapaxes(1, 2).reshape(h // s, w // s, s * s)


def extract_stat_pyramid(image: "GrayImage", config: PyramidConfig) -> FeaturePyramid:
    px = image.pixels
    h, w = px.shape
    for s in config.strides:
        if h % s or w % s:
            raise ConfigError(f"image of size {w}x{h} is not divisible by stride {s}")
    if any(d != STAT_DIM for d in config.dims):
        raise ConfigError(f"the built-in encoder emits {STAT_DIM}-dim descriptors, config asks for {config.dims}")
    gy, gx = np.gradient(px)
    mag = np.hypot(gx, gy)
    bins = orientation_bins(gx, gy)
    scales = []
    for s in config.strides:
        cells = _cell_view(px, s)
        mcells = _cell_view(mag, s)
        bcells = _cell_view(bins, s)
        desc = np.empty(cells.shape[:2] + (STAT_DIM,))
        desc[..., 0] = cells.mean(axis=-1)
        desc[..., 1] = cells.std(axis=-1)
        desc[..., 2] = mcells.mean(axis=-1)
        for b in range(4):
            desc[..., 3 + b] = np.where(bcells == b, mcells, 0.0).sum(axis=-1) / (s * s)
        desc[..., 7] = cells.max(axis=-1) - cells.min(axis=-1)
        scales.append(desc)
    return FeaturePyramid(scales)


def pyramid_from_external(pyramid: FeaturePyramid, config: PyramidConfig) -> FeaturePyramid:
    """Validate an imported pyramid against ``config`` and pass it through."""
    expected = config.shapes()
    if pyramid.shapes != expected:
        raise ConfigError(f"external features have shapes {pyramid.shapes}, config expects {expected}")
    return pyramid
