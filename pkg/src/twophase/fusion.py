"""Weighted map voting across phases and localization-cue extraction.

Fusion takes, per class and pixel, the maximum over phases of the class
probability times the heat-map response. Because independently trained
networks produce responses on arbitrary scales, each class map is peak
normalized before voting so the probabilities carry the cross-phase
weighting. Cues are the pixels strictly above a fraction (default 20%)
of a map's maximum.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import ops


@dataclass
class FusedHeatMapSet:
    maps: np.ndarray        # (class_count, h, w)
    provenance: np.ndarray  # (class_count, h, w) int, winning phase index (0-based)


def peak_normalize(heat_maps):
    """Copy of a heat-map set with each class map divided by its peak.

    Puts maps from independently trained networks on a common [.., 1]
    response scale so that probability weighting, not arbitrary network
    gain, decides the voting. Maps without a positive peak are returned
    unscaled. Peak locations and threshold-relative cues are unaffected.
    """
    maps = np.stack([m / m.max() if m.max() > 0 else m for m in heat_maps.maps])
    return replace(heat_maps, maps=maps)


def weighted_map_voting(sets) -> FusedHeatMapSet:
    """Pixelwise max over phases of probability-scaled heat maps."""
    sets = list(sets)
    if not sets:
        raise ValueError("weighted_map_voting: need at least one heat-map set")
    shape = sets[0].maps.shape
    for s in sets:
        if s.maps.shape != shape or len(s.probs) != shape[0]:
            raise ops.ShapeError(
                f"weighted_map_voting: set shape {s.maps.shape} != expected {shape}")
    weighted = np.stack([s.probs[:, None, None] * s.maps for s in sets])
    provenance = weighted.argmax(axis=0)
    return FusedHeatMapSet(maps=weighted.max(axis=0),
                           provenance=provenance.astype(np.int32))


def extract_cues(heatmap, fraction=0.2):
    """Binary cue mask: 1 where H > fraction*max(H); empty if max <= 0."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"cue fraction must be in (0,1), got {fraction}")
    h = np.asarray(heatmap)
    if h.ndim != 2:
        raise ops.ShapeError(f"extract_cues: map must be rank 2, got shape {h.shape}")
    peak = h.max()
    if peak <= 0:
        return np.zeros(h.shape, dtype=np.float32)
    return (h > fraction * peak).astype(np.float32)
