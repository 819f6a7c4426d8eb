"""Entropy-gated pseudo-labels and old/current region masks.

Ground-truth foreground is never overwritten. A background voxel receives
the teacher's argmax class only when that argmax is not background and the
teacher's predictive entropy falls below the threshold tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_EPS


@dataclass(frozen=True)
class PseudoLabelMap:
    labels: np.ndarray       # (V,) int64 in {0} | old | current classes
    uncertainty: np.ndarray  # (V,) float64, >= 0


@dataclass(frozen=True)
class RegionMasks:
    old: np.ndarray      # (V,) bool, voxels pseudo-labeled as old classes
    current: np.ndarray  # (V,) bool, complement: current classes or background


def entropy_map(teacher_softmax: np.ndarray) -> np.ndarray:
    """Per-voxel Shannon entropy (natural log) of a (V, C) distribution."""
    probs = np.asarray(teacher_softmax, dtype=np.float64)
    sums = probs.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6, rtol=0):
        raise ValueError("class-axis slices must sum to 1 within 1e-6")
    clamped = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return -(clamped * np.log(clamped)).sum(axis=-1)


def pseudo_labels(gt: np.ndarray, teacher_softmax: np.ndarray, old_class_ids,
                  tau: float) -> PseudoLabelMap:
    """Combine current-class ground truth with gated teacher predictions.

    gt: (V,) labels whose foreground is current classes only.
    teacher_softmax: (V, 1 + n_old) over background plus old classes, in the
    order of old_class_ids.
    """
    gt = np.asarray(gt)
    probs = np.asarray(teacher_softmax, dtype=np.float64)
    old_ids = tuple(old_class_ids)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if probs.ndim != 2 or probs.shape[0] != gt.shape[0]:
        raise ValueError(f"teacher shape {probs.shape} mismatches {gt.shape[0]} voxels")
    if probs.shape[1] != 1 + len(old_ids):
        raise ValueError("teacher must cover background plus each old class")

    uncertainty = entropy_map(probs)
    # np.argmax breaks ties toward the lowest channel index
    argmax = probs.argmax(axis=1)
    channel_to_id = np.asarray((0,) + old_ids)
    accepted = (argmax != 0) & (uncertainty < tau)
    labels = np.where(gt != 0, gt, np.where(accepted, channel_to_id[argmax], 0))
    return PseudoLabelMap(labels.astype(np.int64), uncertainty)


def region_masks(pl: PseudoLabelMap, old_classes, current_classes) -> RegionMasks:
    """Binary partition of voxels into old-class and current/background regions."""
    old_ids = tuple(old_classes)
    current_ids = tuple(current_classes)
    allowed = {0, *old_ids, *current_ids}
    present = set(np.unique(pl.labels).tolist())
    if not present <= allowed:
        raise ValueError(f"labels {sorted(present - allowed)} outside {{0}} | old | current")
    old = np.isin(pl.labels, old_ids)
    return RegionMasks(old=old, current=~old)
