"""Flattened multi-scale likelihood representation of an image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .flow import FlowModel
from .scoring import LikelihoodGrid


@dataclass
class Representation:
    features: np.ndarray
    sample_id: Optional[str] = None

    def __len__(self):
        return len(self.features)


def _standardized(grid: LikelihoodGrid, model: FlowModel) -> np.ndarray:
    dec = model.decoders[grid.k]
    return ((grid.values - dec.ll_mean) / dec.ll_std).ravel()


def build_representation(grids: Sequence[LikelihoodGrid], model: FlowModel,
                         sample_id: Optional[str] = None) -> Representation:
    """Concatenate the standardized, row-major flattened grids in scale order."""
    by_k = {g.k: g for g in grids}
    missing = [k for k in range(model.K) if k not in by_k]
    if missing:
        raise ConfigError(f"likelihood grids missing for scales {missing}")
    parts = [_standardized(by_k[k], model) for k in range(model.K)]
    return Representation(np.concatenate(parts), sample_id)


def build_single_scale(grids: Sequence[LikelihoodGrid], model: FlowModel, k: int,
                       sample_id: Optional[str] = None) -> Representation:
    """Representation from scale ``k`` alone (1-based, as in the ablation tables)."""
    if not 1 <= k <= model.K:
        raise ValueError(f"scale index {k} outside 1..{model.K}")
    for g in grids:
        if g.k == k - 1:
            return Representation(_standardized(g, model), sample_id)
    raise ConfigError(f"likelihood grid for scale {k} missing")


def scale_slices(model: FlowModel) -> list[slice]:
    """Where each scale's segment sits inside the concatenated vector."""
    out, start = [], 0
    for H, W, _ in model.pyramid.shapes():
        out.append(slice(start, start + H * W))
        start += H * W
    return out
