"""Binary suppression masks from a frozen earlier-phase model.

A heat map is hard-thresholded at a fraction of its maximum: pixels
strictly above the threshold get 0 (suppressed), everything else 1. Masks
for all classes present in the image labels are combined with a logical
AND. A non-positive maximum yields no suppression.
"""

from dataclasses import dataclass

import numpy as np

from . import network, ops
from .io import write_pgm


@dataclass
class SuppressionMask:
    grid: np.ndarray  # (h, w) float32, values exactly 0.0 or 1.0
    source_phase: int
    threshold_fraction: float


def binarize_heatmap(heatmap, fraction):
    """Eq-style inverse rectification: 0 where H > fraction*max(H), else 1."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"threshold fraction must be in (0,1), got {fraction}")
    h = np.asarray(heatmap)
    if h.ndim != 2:
        raise ops.ShapeError(f"binarize_heatmap: map must be rank 2, got shape {h.shape}")
    peak = h.max()
    if peak <= 0:
        return np.ones(h.shape, dtype=np.float32)
    return (h <= fraction * peak).astype(np.float32)


def combine_masks(grids, shape=None):
    """Logical AND (elementwise product) of binary grids; empty -> all ones."""
    grids = list(grids)
    if not grids:
        if shape is None:
            raise ValueError("combine_masks: empty list needs an explicit shape")
        return np.ones(shape, dtype=np.float32)
    out = np.ones_like(np.asarray(grids[0], dtype=np.float32))
    for g in grids:
        g = np.asarray(g, dtype=np.float32)
        if g.shape != out.shape:
            raise ops.ShapeError(
                f"combine_masks: grid shape {g.shape} != expected {out.shape}")
        out *= g
    return out


def build_suppression_mask(frozen: "network.FcnModel", image, labels, fraction,
                           source_phase=1) -> SuppressionMask:
    """Mask from the frozen model's heat maps of the classes present."""
    labels = np.asarray(labels)
    present = np.flatnonzero(labels > 0)
    if present.size == 0:
        raise ValueError("build_suppression_mask: image has no positive labels")
    hm = network.compute_heatmaps(frozen, image, phase=source_phase)
    grids = [binarize_heatmap(hm.maps[c], fraction) for c in present]
    return SuppressionMask(grid=combine_masks(grids), source_phase=source_phase,
                           threshold_fraction=fraction)


def build_cumulative_mask(frozen_models, image, labels, fraction) -> SuppressionMask:
    """AND of per-model masks, all taken at the given fraction."""
    if not frozen_models:
        raise ValueError("build_cumulative_mask: need at least one frozen model")
    grids = [build_suppression_mask(m, image, labels, fraction, source_phase=i + 1).grid
             for i, m in enumerate(frozen_models)]
    return SuppressionMask(grid=combine_masks(grids),
                           source_phase=len(frozen_models),
                           threshold_fraction=fraction)


def export_pgm(path, mask: SuppressionMask):
    write_pgm(path, (mask.grid * 255).astype(np.uint8))
