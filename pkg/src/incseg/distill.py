"""Prototype-guided affinities and region-calibrated distillation losses.

Channel convention throughout: column 0 is background, then old classes in
introduction order, then the classes of the current step. Affinity weights
are computed from raw feature values and enter the losses as constants; no
gradient flows through them or through the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Array


@dataclass(frozen=True)
class AffinityMap:
    """Per-voxel softmax-normalized cosine similarities to class prototypes."""
    class_ids: tuple[int, ...]
    weights: np.ndarray  # (V, len(class_ids)), rows on the simplex


def cosine_matrix(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity of every feature row against every prototype row.

    All-zero rows on either side contribute 0, carrying no class evidence.
    """
    f_norm = np.linalg.norm(features, axis=1)
    p_norm = np.linalg.norm(prototypes, axis=1)
    denom = f_norm[:, None] * p_norm[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (features @ prototypes.T) / denom
    cos[~np.isfinite(cos)] = 0.0
    return np.clip(cos, -1.0, 1.0)


def affinity(features, class_ids, prototype_matrix: np.ndarray,
             temperature: float = 1.0) -> AffinityMap:
    """Eq-style calibration weights: softmax over per-class cosine similarity."""
    class_ids = tuple(class_ids)
    if not class_ids:
        raise ValueError("affinity needs at least one prototype")
    feats = features.data if isinstance(features, Array) else np.asarray(features)
    protos = np.asarray(prototype_matrix, dtype=np.float64)
    if protos.shape != (len(class_ids), feats.shape[1]):
        raise ValueError(f"prototype matrix {protos.shape} mismatches "
                         f"{len(class_ids)} classes of dim {feats.shape[1]}")
    cos = cosine_matrix(feats, protos) / temperature
    shifted = np.exp(cos - cos.max(axis=1, keepdims=True))
    return AffinityMap(class_ids, shifted / shifted.sum(axis=1, keepdims=True))


def uniform_affinity(n_voxels: int, class_ids) -> AffinityMap:
    """Degenerate affinity (all prototypes equal): plain unweighted distillation."""
    class_ids = tuple(class_ids)
    if not class_ids:
        raise ValueError("affinity needs at least one class")
    weights = np.full((n_voxels, len(class_ids)), 1.0 / len(class_ids))
    return AffinityMap(class_ids, weights)


def fold_new_into_bg(student_softmax: Array, n_keep: int) -> Array:
    """Collapse current-step channels into background, keeping old channels.

    n_keep = 1 + number of old classes. The output rows still sum to 1 and
    old-class columns are carried over unchanged.
    """
    width = student_softmax.shape[1]
    if not 1 <= n_keep <= width:
        raise ValueError(f"n_keep {n_keep} incompatible with width {width}")
    sums = student_softmax.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6, rtol=0):
        raise ValueError("student softmax rows must sum to 1")
    if n_keep == width:
        return student_softmax
    fold = np.zeros((width, n_keep))
    fold[0, 0] = 1.0
    for j in range(1, n_keep):
        fold[j, j] = 1.0
    fold[n_keep:, 0] = 1.0
    return ad.matmul(student_softmax, Array(fold))


def _channel(probs: Array, column: int) -> Array:
    v, width = probs.shape
    return ad.take_flat(probs, np.arange(v) * width + column)


def _kl(p: Array, q, direction: str) -> Array:
    if direction == "forward":      # student || teacher, as the losses are written
        return ad.bernoulli_kl(p, q)
    if direction == "reverse":
        return ad.bernoulli_kl(q, p)
    raise ValueError(f"unknown kl direction {direction!r}")


def orcd_loss(student_softmax: Array, teacher_softmax: np.ndarray,
              aff: AffinityMap, mask: np.ndarray, old_ids,
              kl_direction: str = "forward") -> Array:
    """Old-region calibrated distillation.

    Per-channel Bernoulli KL between the folded student and the teacher over
    old-class channels, weighted per voxel by the affinity, averaged over
    the old-region mask. Empty masks yield 0.
    """
    old_ids = tuple(old_ids)
    if aff.class_ids != old_ids:
        raise ValueError(f"affinity classes {aff.class_ids} != old ids {old_ids}")
    teacher = np.asarray(teacher_softmax)
    v = student_softmax.shape[0]
    if teacher.shape != (v, 1 + len(old_ids)) or mask.shape != (v,):
        raise ValueError("teacher/mask shapes disagree with the student")
    v_old = int(mask.sum())
    if v_old == 0 or not old_ids:
        return Array(0.0)
    folded = fold_new_into_bg(student_softmax, 1 + len(old_ids))
    idx = np.arange(v)[:, None] * (1 + len(old_ids)) + np.arange(1, 1 + len(old_ids))
    stu_old = ad.take_flat(folded, idx)                  # (V, n_old)
    kl = _kl(stu_old, Array(teacher[:, 1:], _checked=True), kl_direction)
    weights = Array(mask[:, None] * aff.weights, _checked=True)
    return (kl * weights).sum() / v_old


def crcd_loss(student_softmax: Array, teacher_softmax: np.ndarray,
              aff: AffinityMap, mask: np.ndarray, old_ids, new_ids,
              kl_direction: str = "forward", include_new: bool = False) -> Array:
    """Current-region calibrated distillation.

    The affinity is computed against all seen classes, so weight mass taken
    by current-step prototypes suppresses old-class distillation exactly
    where features look new. By default the KL itself runs over old-class
    channels; include_new adds terms pushing the student's current-step
    channels toward the teacher's (clamped) zero.
    """
    old_ids, new_ids = tuple(old_ids), tuple(new_ids)
    seen = set(old_ids) | set(new_ids)
    if not set(aff.class_ids) <= seen:
        raise ValueError(f"affinity classes {aff.class_ids} outside seen set")
    v = student_softmax.shape[0]
    teacher = np.asarray(teacher_softmax)
    if teacher.shape != (v, 1 + len(old_ids)) or mask.shape != (v,):
        raise ValueError("teacher/mask shapes disagree with the student")
    v_cur = int(mask.sum())
    if v_cur == 0:
        return Array(0.0)
    folded = fold_new_into_bg(student_softmax, 1 + len(old_ids))
    total = Array(0.0)
    for j, cid in enumerate(aff.class_ids):
        if cid in old_ids:
            col = 1 + old_ids.index(cid)
            kl = _kl(_channel(folded, col), Array(teacher[:, col], _checked=True),
                     kl_direction)
        elif include_new:
            col = 1 + len(old_ids) + new_ids.index(cid)
            kl = _kl(_channel(student_softmax, col), Array(PROB_EPS), kl_direction)
        else:
            continue
        total = total + (kl * Array(mask * aff.weights[:, j], _checked=True)).sum()
    return total / v_cur


def unbiased_ce(student_softmax: Array, gt: np.ndarray, old_ids, new_ids,
                mode: str = "unbiased") -> Array:
    """Cross-entropy where background credit spreads over {bg} | old classes.

    Foreground voxels score the probability of their ground-truth channel;
    background voxels score the background probability plus, in unbiased
    mode, everything the student assigns to old classes (those voxels may
    well be old-class anatomy). mode="standard" scores background alone.
    """
    if mode not in ("unbiased", "standard"):
        raise ValueError(f"unknown ce mode {mode!r}")
    old_ids, new_ids = tuple(old_ids), tuple(new_ids)
    gt = np.asarray(gt).ravel()
    v, width = student_softmax.shape
    if gt.shape[0] != v:
        raise ValueError("label count disagrees with the student")
    if width != 1 + len(old_ids) + len(new_ids):
        raise ValueError("softmax width disagrees with the class sets")
    stray = set(np.unique(gt).tolist()) - {0, *new_ids}
    if stray:
        raise ValueError(f"labels {sorted(stray)} outside background | current classes")

    select = np.zeros((v, width))
    bg = gt == 0
    select[bg, 0] = 1.0
    if mode == "unbiased":
        select[bg, 1:1 + len(old_ids)] = 1.0
    channel_of = {cid: 1 + len(old_ids) + j for j, cid in enumerate(new_ids)}
    for cid in np.unique(gt):
        if cid == 0:
            continue
        select[gt == cid, channel_of[int(cid)]] = 1.0
    q = (student_softmax * Array(select, _checked=True)).sum(axis=1)
    return -(ad.log(ad.clip(q, PROB_EPS, 1.0 - PROB_EPS))).mean()
