"""Deterministic synthetic labeled volumes for desk-scale experiments.

Each phantom places one ellipsoidal region per requested class on a jittered
grid, with class-correlated intensities plus Gaussian noise. Intensity means
are spread across [0.2, 0.9] but the middle pair is squeezed together so two
classes stay confusable; naive sequential training must be able to forget.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

NOISE_SIGMA = 0.05
BACKGROUND_MEAN = 0.08
CLOSE_PAIR_GAP = 0.08


@dataclass(frozen=True)
class PhantomVolume:
    intensity: np.ndarray  # (1, H, W, D) float64 in [0, 1]
    labels: np.ndarray     # (H, W, D) int64, 0 = background
    seed: int


@dataclass(frozen=True)
class StepDataset:
    """Volumes with labels restricted to the classes of one training step."""
    volumes: tuple[PhantomVolume, ...]
    current_classes: tuple[int, ...]


def class_intensity_means(n: int) -> np.ndarray:
    """Intensity means for n classes; the middle adjacent pair sits close."""
    if n == 1:
        return np.array([0.55])
    means = np.linspace(0.2, 0.9, n)
    if n >= 3:
        mid = (n - 1) // 2
        means[mid + 1] = means[mid] + CLOSE_PAIR_GAP
    return means


def _grid_cells(n: int, size: tuple[int, int, int]):
    """Split the volume into n cells, one region per class."""
    h, w, d = size
    flat = d == 1
    if flat:
        gw = int(np.ceil(np.sqrt(n)))
        gh = int(np.ceil(n / gw))
        grid = (gh, gw, 1)
    else:
        gd = 1 if n <= 4 else 2
        gw = int(np.ceil(np.sqrt(n / gd)))
        gh = int(np.ceil(n / (gw * gd)))
        grid = (gh, gw, gd)
    cells = []
    for i in range(n):
        gy = i // (grid[1] * grid[2])
        gx = (i // grid[2]) % grid[1]
        gz = i % grid[2]
        lo = (gy * h // grid[0], gx * w // grid[1], gz * d // grid[2])
        hi = ((gy + 1) * h // grid[0], (gx + 1) * w // grid[1], (gz + 1) * d // grid[2])
        cells.append((lo, hi))
    return cells


def generate_volume(seed: int, class_set, size: tuple[int, int, int]) -> PhantomVolume:
    """Build one labeled phantom; a pure function of (seed, class_set, size)."""
    class_ids = tuple(class_set)
    if not 1 <= len(class_ids) <= 8:
        raise ValueError("class_set must hold between 1 and 8 classes")
    h, w, d = size
    if h < 8 or w < 8 or (d != 1 and d < 8):
        raise ValueError(f"size {size} too small (each axis >= 8, or D == 1)")

    rng = np.random.default_rng(seed)
    labels = np.zeros(size, dtype=np.int64)
    cells = _grid_cells(len(class_ids), size)
    coords = np.indices(size, dtype=np.float64)
    for cid, (lo, hi) in zip(class_ids, cells):
        extents = np.array(hi) - np.array(lo)
        if min(e for e, axis in zip(extents, size) if axis > 1) < 6:
            raise ValueError(f"size {size} too small to place {len(class_ids)} classes")
        center, radii = [], []
        for e, l, axis_len in zip(extents, lo, size):
            if axis_len == 1:
                center.append(0.0)
                radii.append(1.0)
                continue
            jitter = rng.uniform(-e / 8.0, e / 8.0)
            center.append(l + e / 2.0 + jitter)
            radii.append(rng.uniform(0.22 * e, 0.38 * e))
        dist = sum(((coords[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        inside = dist <= 1.0
        if not inside.any():
            raise ValueError(f"class {cid} region collapsed at size {size}")
        labels[inside] = cid

    means = class_intensity_means(len(class_ids))
    intensity = rng.normal(BACKGROUND_MEAN, NOISE_SIGMA, size=size)
    for cid, mu in zip(class_ids, means):
        mask = labels == cid
        intensity[mask] = rng.normal(mu, NOISE_SIGMA, size=int(mask.sum()))
    intensity = np.clip(intensity, 0.0, 1.0)

    for cid in class_ids:
        if not (labels == cid).any():
            raise ValueError(f"class {cid} lost all voxels")
    return PhantomVolume(intensity[None], labels, seed)


def make_step_dataset(base, current_classes) -> StepDataset:
    """Remap every label outside current_classes to background."""
    current = tuple(current_classes)
    if not current:
        raise ValueError("current_classes must be non-empty")
    present = set()
    for vol in base:
        present.update(np.unique(vol.labels).tolist())
    missing = set(current) - present
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from base volumes")
    remapped = []
    for vol in base:
        keep = np.isin(vol.labels, current)
        labels = np.where(keep, vol.labels, 0)
        remapped.append(PhantomVolume(vol.intensity, labels, vol.seed))
    return StepDataset(tuple(remapped), current)


def split_train_test(volumes, train_fraction: float = 0.8):
    """Deterministic split; volumes are already seed-randomized."""
    n_train = int(round(len(volumes) * train_fraction))
    return list(volumes[:n_train]), list(volumes[n_train:])


def export_volume(vol: PhantomVolume, basepath) -> None:
    """Write intensity/labels as flat binary with a text sidecar header."""
    base = Path(basepath)
    vol.intensity.astype("<f8").tofile(base.with_suffix(".intensity.raw"))
    vol.labels.astype("<i8").tofile(base.with_suffix(".labels.raw"))
    h, w, d = vol.labels.shape
    header = (
        "phantom-volume v1\n"
        f"shape {h} {w} {d}\n"
        "intensity_dtype float64-le\n"
        "labels_dtype int64-le\n"
        "order C\n"
        f"seed {vol.seed}\n"
    )
    base.with_suffix(".header.txt").write_text(header)


def load_volume(basepath) -> PhantomVolume:
    base = Path(basepath)
    lines = base.with_suffix(".header.txt").read_text().splitlines()
    if not lines or lines[0] != "phantom-volume v1":
        raise ValueError(f"unrecognized phantom header at {base}")
    fields = dict(line.split(maxsplit=1) for line in lines[1:] if line)
    shape = tuple(int(v) for v in fields["shape"].split())
    seed = int(fields["seed"])
    intensity = np.fromfile(base.with_suffix(".intensity.raw"), dtype="<f8")
    labels = np.fromfile(base.with_suffix(".labels.raw"), dtype="<i8")
    return PhantomVolume(intensity.reshape((1,) + shape), labels.reshape(shape), seed)
