"""Monte-Carlo predictive samples and the total-variance decomposition.

Each sample is a per-pixel foreground probability ``p_s`` produced under one
draw of the random quantities (latent ``z`` and final-layer weights ``w``).
Per pixel,

    aleatoric  = mean_s p_s (1 - p_s)
    epistemic  = mean_s (p_s - p_bar)^2
    predictive = aleatoric + epistemic = p_bar (1 - p_bar)

with population (1/S) averages throughout so the identity is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError


@dataclass
class ProbMapSampleSet:
    maps: np.ndarray  # (S, H, W) in [0, 1]

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise ValidationError(f"sample maps must have shape (S, H, W) with S >= 1, got {maps.shape}")
        if not np.all((maps >= 0.0) & (maps <= 1.0)):
            raise ValidationError("sample maps must hold probabilities in [0, 1]")
        self.maps = maps

    @property
    def sample_count(self) -> int:
        return self.maps.shape[0]


@dataclass
class UncertaintyMaps:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    predictive: np.ndarray


def draw_samples(model, pixels, samples: int = 50, generator: torch.Generator | None = None) -> ProbMapSampleSet:
    """``samples`` independent predictive draws for one image.

    ``model`` needs a ``sample_prob_maps(pixels, samples, generator)`` method;
    each draw uses a fresh prior latent and fresh final-layer weights.
    """
    if samples < 1:
        raise ValidationError(f"sample count must be >= 1, got {samples}")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    return ProbMapSampleSet(model.sample_prob_maps(pixels, samples, generator))


def decompose(s: ProbMapSampleSet) -> UncertaintyMaps:
    p = s.maps
    p_bar = p.mean(axis=0)
    aleatoric = (p * (1.0 - p)).mean(axis=0)
    epistemic = ((p - p_bar) ** 2).mean(axis=0)
    return UncertaintyMaps(aleatoric=aleatoric, epistemic=epistemic, predictive=aleatoric + epistemic)


def binarize_samples(s: ProbMapSampleSet, threshold: float = 0.5) -> list[np.ndarray]:
    """Threshold every map; pixels exactly at the threshold count as foreground."""
    return [(m >= threshold).astype(np.uint8) for m in s.maps]
