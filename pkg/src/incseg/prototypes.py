"""Per-batch and cumulative class prototypes over penultimate features.

A local prototype is the arithmetic mean of a class's feature vectors in one
batch. Global prototypes stream the same means across batches with a
cumulative moving average, so the stored vector always equals the mean of
every feature vector ever attributed to the class. The background prototype
is rebuilt from scratch at the end of every incremental step because the
meaning of "background" shifts as classes arrive.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Array, take_flat


class StoreLoadError(Exception):
    """Raised when a prototype snapshot file cannot be parsed."""


@dataclass
class LocalPrototypes:
    vectors: dict          # class id -> (K,) Array (student) or ndarray (teacher)
    counts: dict[int, int]
    source: str            # "student" | "teacher"

    def classes(self):
        return sorted(self.vectors)


def local_prototypes(features, labels: np.ndarray, class_set,
                     source: str = "student") -> LocalPrototypes:
    """Mean feature vector per class over voxels where labels == class.

    features: (V, K) Array (kept differentiable) or ndarray. Classes without
    any contributing voxel are omitted.
    """
    labels = np.asarray(labels).ravel()
    differentiable = isinstance(features, Array)
    data = features.data if differentiable else np.asarray(features)
    if data.ndim != 2 or data.shape[0] != labels.shape[0]:
        raise ValueError(f"features {data.shape} mismatch {labels.shape[0]} voxels")
    k = data.shape[1]
    vectors, counts = {}, {}
    for c in class_set:
        sel = np.flatnonzero(labels == c)
        if sel.size == 0:
            continue
        if differentiable:
            idx = sel[:, None] * k + np.arange(k)[None, :]
            vectors[c] = take_flat(features, idx).mean(axis=0)
        else:
            vectors[c] = data[sel].mean(axis=0)
        counts[c] = int(sel.size)
    return LocalPrototypes(vectors, counts, source)


class PrototypeStore:
    """Global prototypes: class id -> (mean vector, observed voxel count)."""

    def __init__(self, feature_dim: int, step: int = 0):
        self.feature_dim = feature_dim
        self.step = step
        self._means: dict[int, np.ndarray] = {}
        self._counts: dict[int, int] = {}

    def classes(self):
        return sorted(self._means)

    def has(self, c: int) -> bool:
        return c in self._means

    def vector(self, c: int) -> np.ndarray:
        return self._means[c]

    def count(self, c: int) -> int:
        return self._counts[c]

    def update(self, c: int, batch_sum: np.ndarray, batch_count: int) -> None:
        """Cumulative moving average update from one batch's sum and count."""
        if batch_count < 0:
            raise ValueError("batch_count must be nonnegative")
        if batch_count == 0:
            return
        batch_sum = np.asarray(batch_sum, dtype=np.float64)
        if batch_sum.shape != (self.feature_dim,):
            raise ValueError(f"batch_sum must have length {self.feature_dim}")
        n_pre = self._counts.get(c, 0)
        if n_pre == 0:
            self._means[c] = batch_sum / batch_count
        else:
            self._means[c] = (n_pre * self._means[c] + batch_sum) / (n_pre + batch_count)
        self._counts[c] = n_pre + batch_count

    def drop(self, c: int) -> None:
        self._means.pop(c, None)
        self._counts.pop(c, None)

    def matrix(self, class_ids) -> np.ndarray:
        return np.stack([self._means[c] for c in class_ids])

    def copy(self) -> "PrototypeStore":
        dup = PrototypeStore(self.feature_dim, self.step)
        dup._means = {c: v.copy() for c, v in self._means.items()}
        dup._counts = dict(self._counts)
        return dup

    def __eq__(self, other):
        if not isinstance(other, PrototypeStore):
            return NotImplemented
        return (self.feature_dim == other.feature_dim and self.step == other.step
                and self._counts == other._counts
                and self._means.keys() == other._means.keys()
                and all(np.array_equal(self._means[c], other._means[c])
                        for c in self._means))


def finalize_step_globals(snapshot, volumes, voxel_labels, prev_store,
                          step: int) -> PrototypeStore:
    """One frozen pass over a step's training data, accumulating per-class CMA.

    snapshot: the just-trained model, frozen. voxel_labels: per volume, the
    flat attribution map (ground truth for current classes, pseudo-labels
    for old ones, 0 for background). Old-class streams continue the counts
    carried in prev_store; the background prototype is recomputed fresh.
    """
    if not volumes:
        raise ValueError("cannot finalize globals over an empty dataset")
    store = prev_store.copy() if prev_store is not None \
        else PrototypeStore(snapshot.feature_dim)
    store.drop(0)
    store.step = step
    k = snapshot.feature_dim
    for vol, labels in zip(volumes, voxel_labels):
        feats, _ = snapshot.forward(vol.intensity[None])
        flat = np.moveaxis(feats, 1, 0).reshape(k, -1).T  # (V, K)
        labels = np.asarray(labels).ravel()
        for c in np.unique(labels):
            sel = labels == c
            store.update(int(c), flat[sel].sum(axis=0), int(sel.sum()))
    return store


STORE_MAGIC = "incseg-prototypes v1"


def save_store(store: PrototypeStore, path) -> None:
    """Persist as structured text: one record per class."""
    lines = [STORE_MAGIC,
             f"feature_dim {store.feature_dim}",
             f"step {store.step}"]
    for c in store.classes():
        values = " ".join(repr(float(v)) for v in store.vector(c))
        lines.append(f"class {c} count {store.count(c)} values {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_store(path) -> PrototypeStore:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise StoreLoadError(str(exc)) from exc
    if not lines or lines[0] != STORE_MAGIC:
        raise StoreLoadError(f"{path}: not a prototype snapshot")
    try:
        feature_dim = int(lines[1].split()[1])
        step = int(lines[2].split()[1])
        store = PrototypeStore(feature_dim, step)
        for line in lines[3:]:
            if not line.strip():
                continue
            tokens = line.split()
            if tokens[0] != "class" or tokens[2] != "count" or tokens[4] != "values":
                raise StoreLoadError(f"{path}: malformed record {line!r}")
            values = np.array([float(t) for t in tokens[5:]])
            if values.shape != (feature_dim,) or not np.all(np.isfinite(values)):
                raise StoreLoadError(f"{path}: bad vector for class {tokens[1]}")
            store._means[int(tokens[1])] = values
            store._counts[int(tokens[1])] = int(tokens[3])
    except StoreLoadError:
        raise
    except (IndexError, ValueError) as exc:
        raise StoreLoadError(f"{path}: corrupted snapshot ({exc})") from exc
    return store
