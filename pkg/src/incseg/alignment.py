"""Dual prototype alignment: unbiased background merge plus distillation.

The student's background local prototype absorbs its current-step class
prototypes (the stored targets saw those classes as background), then every
old class and the merged background are pulled toward both the teacher's
batch-local prototypes and the stored global prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array
from .prototypes import LocalPrototypes

MERGE_MODES = ("sum", "count_mean")


def _as_array(v) -> Array:
    return v if isinstance(v, Array) else Array(np.asarray(v, dtype=np.float64))


@dataclass(frozen=True)
class LossWeights:
    ll: float = 0.5    # local-to-local alignment
    lg: float = 0.1    # local-to-global alignment
    orcd: float = 1.0
    crcd: float = 0.5

    def __post_init__(self):
        for name in ("ll", "lg", "orcd", "crcd"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class MergedPrototypes:
    vectors: dict  # class id -> (K,) Array/ndarray; key 0 is the merged background
    mode: str


def unbiased_merge(student_locals: LocalPrototypes, current_classes,
                   mode: str = "sum") -> MergedPrototypes:
    """Fold current-step local prototypes into the background entry.

    mode="sum" adds the vectors literally; mode="count_mean" forms the
    voxel-count weighted mean instead, which keeps the merged background on
    the same magnitude scale as its targets. Old-class entries pass through
    untouched; current-step classes absent from the batch are skipped.
    """
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}")
    if 0 not in student_locals.vectors:
        raise ValueError("background local prototype missing")
    current = tuple(current_classes)
    merged = {}
    bg = _as_array(student_locals.vectors[0])
    if mode == "sum":
        for c in current:
            if c in student_locals.vectors:
                bg = bg + _as_array(student_locals.vectors[c])
    else:
        total = student_locals.counts[0]
        bg = bg * float(total)
        for c in current:
            if c in student_locals.vectors:
                bg = bg + _as_array(student_locals.vectors[c]) * float(student_locals.counts[c])
                total += student_locals.counts[c]
        bg = bg / float(total)
    merged[0] = bg
    for c, vec in student_locals.vectors.items():
        if c != 0 and c not in current:
            merged[c] = vec
    return MergedPrototypes(merged, mode)


def prototype_distance(merged: MergedPrototypes, targets: dict) -> Array:
    """Mean squared L2 distance over the classes present on both sides."""
    shared = [c for c in merged.vectors if c in targets]
    if not shared:
        raise ValueError("no overlapping classes between prototypes and targets")
    total = Array(0.0)
    for c in shared:
        diff = _as_array(merged.vectors[c]) - Array(np.asarray(targets[c], dtype=np.float64))
        total = total + (diff * diff).sum()
    return total / float(len(shared))


def dapd_loss(student_locals: LocalPrototypes, teacher_locals: LocalPrototypes,
              global_vectors: dict, current_classes, weights: LossWeights,
              merge_mode: str = "sum") -> Array:
    """Weighted sum of local-to-local and local-to-global alignment distances.

    Gradients reach only the student's local prototypes; teacher locals and
    the stored globals enter as constants.
    """
    merged = unbiased_merge(student_locals, current_classes, merge_mode)
    teacher_targets = {c: np.asarray(v) for c, v in teacher_locals.vectors.items()}
    d_ll = prototype_distance(merged, teacher_targets)
    d_lg = prototype_distance(merged, global_vectors)
    return weights.ll * d_ll + weights.lg * d_lg
