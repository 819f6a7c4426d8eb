"""Incremental training orchestration.

Parses N1-N2 protocols into class schedules, trains a SegNet step by step
(teacher freezing, head expansion, pseudo-labels, calibrated distillation,
prototype alignment), finalizes and persists global prototypes after every
step, and evaluates Dice scores on held-out phantoms. Baselines (naive
fine-tuning, plain unbiased distillation, offline joint training) are plain
configuration presets of the same loop.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from statistics import fmean

import numpy as np

from . import autodiff as ad
from .alignment import LossWeights, dapd_loss
from .autodiff import Array
from .distill import AffinityMap, affinity, crcd_loss, orcd_loss, unbiased_ce, uniform_affinity
from .model import SegNet, expand_head, save_checkpoint, snapshot_freeze
from .phantoms import generate_volume, make_step_dataset, split_train_test
from .prototypes import (PrototypeStore, finalize_step_globals,
                         local_prototypes, save_store)
from .pseudo import PseudoLabelMap, pseudo_labels, region_masks

OUTPUT_ROOT_ENV = "INCSEG_OUTPUT_ROOT"


class ConfigError(Exception):
    """Raised for malformed configuration files or invalid settings."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss component stops being finite."""


# ------------------------------------------------------------- protocol

@dataclass(frozen=True)
class ProtocolSchedule:
    """Ordered disjoint class sets, one per incremental step."""
    steps: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = [c for step in self.steps for c in step]
        if len(set(flat)) != len(flat):
            raise ConfigError("schedule steps must be pairwise disjoint")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for step in self.steps for c in step)

    def seen(self, t: int) -> tuple[int, ...]:
        """Classes introduced in steps 1..t (1-based)."""
        return tuple(c for step in self.steps[:t] for c in step)


def parse_protocol(notation: str, class_ids) -> ProtocolSchedule:
    """Expand "N1-N2" notation over an ordered class list."""
    class_ids = tuple(class_ids)
    m = re.fullmatch(r"(\d+)-(\d+)", notation.strip())
    if not m:
        raise ConfigError(f"protocol {notation!r} is not of the form N1-N2")
    n1, n2 = int(m.group(1)), int(m.group(2))
    if n1 < 1 or n2 < 1 or n1 > len(class_ids):
        raise ConfigError(f"protocol {notation!r} invalid for {len(class_ids)} classes")
    if (len(class_ids) - n1) % n2 != 0:
        raise ConfigError(f"protocol {notation!r} does not divide {len(class_ids)} classes")
    steps = [class_ids[:n1]]
    for start in range(n1, len(class_ids), n2):
        steps.append(class_ids[start:start + n2])
    return ProtocolSchedule(tuple(steps))


# --------------------------------------------------------------- config

@dataclass(frozen=True)
class RunConfig:
    protocol: str = "2-2"
    num_classes: int = 4
    volume_shape: tuple = (64, 64, 1)
    volumes: int = 20
    seed: int = 0
    feature_dim: int = 16
    nonlinearity: str = "relu"
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    tau: float = 0.7
    lambda_ll: float = 0.5
    lambda_lg: float = 0.1
    lambda_orcd: float = 1.0
    lambda_crcd: float = 0.5
    merge_mode: str = "sum"
    kl_direction: str = "forward"
    ce_mode: str = "unbiased"
    pseudo_labeling: bool = True
    uniform_affinity: bool = False
    crcd_include_new: bool = False
    affinity_temperature: float = 1.0
    new_head_bias: str = "background"
    method: str = "ours"
    output_dir: str = "runs/incseg"

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ll, self.lambda_lg,
                           self.lambda_orcd, self.lambda_crcd)


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ConfigError(f"{name}: expected HxWxD, got {text!r}")
        return tuple(int(p) for p in parts)
    return text


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys error."""
    kinds = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val, kinds[key])
    cfg = replace(base or RunConfig(), **values)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def validate_config(cfg: RunConfig) -> None:
    if cfg.merge_mode not in ("sum", "count_mean"):
        raise ConfigError(f"merge_mode {cfg.merge_mode!r} unknown")
    if cfg.kl_direction not in ("forward", "reverse"):
        raise ConfigError(f"kl_direction {cfg.kl_direction!r} unknown")
    if cfg.ce_mode not in ("unbiased", "standard"):
        raise ConfigError(f"ce_mode {cfg.ce_mode!r} unknown")
    if cfg.tau < 0:
        raise ConfigError("tau must be nonnegative")
    if cfg.num_classes < 1 or cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("num_classes, epochs and batch_size must be positive")
    cfg.weights()  # LossWeights rejects negative values on construction


def resolve_output_dir(cfg: RunConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / cfg.output_dir
    return Path(cfg.output_dir)


def baseline_config(cfg: RunConfig, mode: str) -> RunConfig:
    """Realize a baseline purely through configuration."""
    if mode == "finetune":
        return replace(cfg, method="finetune", lambda_ll=0.0, lambda_lg=0.0,
                       lambda_orcd=0.0, lambda_crcd=0.0,
                       pseudo_labeling=False, ce_mode="standard")
    if mode == "plainkd":
        return replace(cfg, method="plainkd", uniform_affinity=True,
                       lambda_ll=0.0, lambda_lg=0.0)
    if mode == "offline":
        return replace(cfg, method="offline")
    raise ConfigError(f"unknown baseline mode {mode!r}")


# -------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricsReport:
    step: int
    method: str
    per_class: dict
    old_dsc: float
    new_dsc: float | None
    all_dsc: float


def total_loss(ce, orcd, crcd, dapd, weights: LossWeights):
    """Overall objective: ce + w_orcd*orcd + w_crcd*crcd + dapd."""
    parts = {"ce": ce, "orcd": orcd, "crcd": crcd, "dapd": dapd}
    for name, value in parts.items():
        scalar = value.item() if isinstance(value, Array) else float(value)
        if not np.isfinite(scalar):
            raise TrainingDiverged(f"loss component {name} is {scalar}")
    ce = ce if isinstance(ce, Array) else Array(float(ce))
    return ce + weights.orcd * orcd + weights.crcd * crcd + dapd


def dsc(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """Dice overlap for one class; 1.0 when the class is absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == c
    g = gt == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def aggregate_metrics(per_class: dict, schedule: ProtocolSchedule,
                      upto_step: int | None = None,
                      method: str = "ours") -> MetricsReport:
    """Old/New/All means over the classes seen by upto_step."""
    t = upto_step if upto_step is not None else schedule.num_steps
    seen = schedule.seen(t)
    missing = [c for c in seen if c not in per_class]
    if missing:
        raise ValueError(f"missing DSC entries for classes {missing}")
    initial = schedule.steps[0]
    incremental = [c for c in seen if c not in initial]
    old = fmean(per_class[c] for c in initial)
    new = fmean(per_class[c] for c in incremental) if incremental else None
    all_ = fmean(per_class[c] for c in seen)
    return MetricsReport(t, method, {c: per_class[c] for c in seen}, old, new, all_)


# ------------------------------------------------------------- training

class SGD:
    """Plain momentum SGD over the network's parameter list."""

    def __init__(self, params, lr: float, momentum: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data -= self.lr * v


@dataclass
class _TeacherCache:
    """Per-volume teacher products, all constant for one step."""
    probs: np.ndarray
    features: np.ndarray
    pseudo: PseudoLabelMap
    mask_old: np.ndarray
    mask_cur: np.ndarray
    aff_old_weights: np.ndarray | None


@dataclass
class StepRecord:
    step: int
    classes: tuple
    report: MetricsReport
    checkpoint: Path | None
    prototypes: Path | None


@dataclass
class RunResult:
    config: RunConfig
    schedule: ProtocolSchedule
    records: list
    output_dir: Path | None

    @property
    def final_report(self) -> MetricsReport:
        return self.records[-1].report


def _flatten_features(features: Array, k: int) -> Array:
    return features.moveaxis(1, 4).reshape((-1, k))


def _flatten_probs(logits: Array) -> Array:
    width = logits.shape[1]
    flat = logits.moveaxis(1, 4).reshape((-1, width))
    return ad.softmax(flat, 1)


def _np_flatten(arr: np.ndarray) -> np.ndarray:
    # (B, C, H, W, D) -> (B*V, C)
    return np.moveaxis(arr, 1, 4).reshape(-1, arr.shape[1])


def _build_teacher_cache(cfg, teacher, volume, gt_flat, old_ids, step_classes,
                         prev_store):
    t_feats, t_logits = teacher.forward(volume.intensity[None])
    probs = ad.softmax(Array(_np_flatten(t_logits), _checked=True), 1).data
    feats = _np_flatten(t_feats)
    if cfg.pseudo_labeling:
        plm = pseudo_labels(gt_flat, probs, old_ids, cfg.tau)
    else:
        plm = PseudoLabelMap(gt_flat.astype(np.int64), np.zeros(gt_flat.shape[0]))
    masks = region_masks(plm, old_ids, step_classes)
    if cfg.lambda_orcd > 0 and old_ids:
        if cfg.uniform_affinity:
            aff_w = uniform_affinity(feats.shape[0], old_ids).weights
        else:
            aff_w = affinity(feats, old_ids, prev_store.matrix(old_ids),
                             cfg.affinity_temperature).weights
    else:
        aff_w = None
    return _TeacherCache(probs, feats, plm, masks.old, masks.current, aff_w)


def _student_affinity(cfg, feats_data, old_ids, new_ids, train_store):
    """Affinity of current-model features against all seen prototypes."""
    seen = tuple(old_ids) + tuple(new_ids)
    if cfg.uniform_affinity:
        return uniform_affinity(feats_data.shape[0], seen)
    with_protos = tuple(c for c in seen if train_store.has(c))
    if not with_protos:
        return None
    return affinity(feats_data, with_protos, train_store.matrix(with_protos),
                    cfg.affinity_temperature)


def evaluate_model(net: SegNet, volumes, class_ids) -> dict:
    """Mean per-class DSC over volumes; channel i+1 predicts class_ids[i]."""
    channel_to_id = np.asarray((0,) + tuple(class_ids))
    scores = {c: [] for c in class_ids}
    for vol in volumes:
        _, logits = net.forward(vol.intensity[None])
        pred = channel_to_id[np.argmax(logits.data[0], axis=0)]
        for c in class_ids:
            scores[c].append(dsc(pred, vol.labels, c))
    return {c: fmean(v) for c, v in scores.items()}


def _train_step(cfg, net, step_classes, old_ids, train_volumes,
                teacher, prev_store, rng):
    """Run the epochs of one incremental step; returns the streaming store."""
    k = cfg.feature_dim
    weights = cfg.weights()
    step_ds = make_step_dataset(train_volumes, step_classes)
    gt_flat = [vol.labels.ravel() for vol in step_ds.volumes]

    caches = None
    if teacher is not None:
        caches = [_build_teacher_cache(cfg, teacher, vol, gt, old_ids,
                                       step_classes, prev_store)
                  for vol, gt in zip(step_ds.volumes, gt_flat)]

    train_store = prev_store.copy() if prev_store is not None else PrototypeStore(k)
    optimizer = SGD(net.parameters(), cfg.learning_rate, cfg.momentum)
    use_dapd = teacher is not None and (weights.ll > 0 or weights.lg > 0)
    use_orcd = teacher is not None and weights.orcd > 0
    use_crcd = teacher is not None and weights.crcd > 0
    n = len(step_ds.volumes)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = np.stack([step_ds.volumes[i].intensity for i in batch])
            gt = np.concatenate([gt_flat[i] for i in batch])
            with ad.Tape() as tape:
                feats, logits = net.forward(x)
                probs = _flatten_probs(logits)
                ce = unbiased_ce(probs, gt, old_ids, step_classes, cfg.ce_mode)
                if teacher is None:
                    loss = total_loss(ce, 0.0, 0.0, 0.0, weights)
                else:
                    t_probs = np.concatenate([caches[i].probs for i in batch])
                    pl = np.concatenate([caches[i].pseudo.labels for i in batch])
                    m_old = np.concatenate([caches[i].mask_old for i in batch])
                    m_cur = np.concatenate([caches[i].mask_cur for i in batch])
                    feats_flat = _flatten_features(feats, k)

                    orcd = Array(0.0)
                    if use_orcd:
                        aff_w = np.concatenate([caches[i].aff_old_weights for i in batch])
                        orcd = orcd_loss(probs, t_probs, AffinityMap(old_ids, aff_w),
                                         m_old, old_ids, cfg.kl_direction)
                    crcd = Array(0.0)
                    if use_crcd:
                        aff_cur = _student_affinity(cfg, feats_flat.data, old_ids,
                                                    step_classes, train_store)
                        if aff_cur is not None:
                            crcd = crcd_loss(probs, t_probs, aff_cur, m_cur,
                                             old_ids, step_classes,
                                             cfg.kl_direction, cfg.crcd_include_new)
                    dapd = Array(0.0)
                    if use_dapd:
                        stu_locals = local_prototypes(feats_flat, pl,
                                                      (0,) + old_ids + step_classes)
                        if 0 in stu_locals.vectors:
                            t_feats = np.concatenate([caches[i].features for i in batch])
                            tea_locals = local_prototypes(t_feats, pl, (0,) + old_ids,
                                                          source="teacher")
                            globals_ = {c: prev_store.vector(c)
                                        for c in (0,) + old_ids if prev_store.has(c)}
                            dapd = dapd_loss(stu_locals, tea_locals, globals_,
                                             step_classes, weights, cfg.merge_mode)
                    loss = total_loss(ce, orcd, crcd, dapd, weights)
            tape.backward(loss)
            optimizer.step([tape.grad(p) for p in net.parameters()])

            # stream current-class prototypes so the next batch's affinity sees them
            feats_np = _np_flatten(feats.data)
            for c in step_classes:
                sel = gt == c
                if sel.any():
                    train_store.update(c, feats_np[sel].sum(axis=0), int(sel.sum()))

    attribution = [c.pseudo.labels for c in caches] if caches is not None else gt_flat
    return step_ds, attribution, train_store


def run_protocol(cfg: RunConfig, write_outputs: bool = True,
                 log=None) -> RunResult:
    """Execute the full incremental protocol described by cfg."""
    from . import report as report_mod

    validate_config(cfg)
    say = log or (lambda msg: None)
    class_ids = tuple(range(1, cfg.num_classes + 1))
    if cfg.method == "offline":
        schedule = ProtocolSchedule((class_ids,))
    else:
        schedule = parse_protocol(cfg.protocol, class_ids)

    volumes = [generate_volume(cfg.seed * 100_000 + i, class_ids, cfg.volume_shape)
               for i in range(cfg.volumes)]
    train_volumes, test_volumes = split_train_test(volumes)
    if not train_volumes or not test_volumes:
        raise ConfigError("volume count too small for the 8:2 split")

    kernel_depth = 3 if cfg.volume_shape[2] >= 7 else 1
    net = SegNet(cfg.feature_dim, len(schedule.steps[0]), kernel_depth,
                 seed=cfg.seed, nonlinearity=cfg.nonlinearity)
    rng = np.random.default_rng(cfg.seed + 11)

    out_dir = resolve_output_dir(cfg) if write_outputs else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    metrics_rows = []
    summary_rows = []
    prev_store = None
    teacher = None

    for t, step_classes in enumerate(schedule.steps, start=1):
        old_ids = schedule.seen(t - 1)
        if t > 1:
            teacher = snapshot_freeze(net, step=t - 1)
            net = expand_head(net, len(step_classes), seed=cfg.seed + 1000 + t,
                              bias_mode=cfg.new_head_bias)
        say(f"[{cfg.method}] step {t}/{schedule.num_steps}: classes {step_classes}")
        step_ds, attribution, _ = _train_step(
            cfg, net, step_classes, old_ids, train_volumes, teacher,
            prev_store, rng)

        snapshot = snapshot_freeze(net, step=t)
        prev_store = finalize_step_globals(snapshot, step_ds.volumes, attribution,
                                           prev_store, step=t)

        ckpt_path = store_path = None
        if out_dir is not None:
            ckpt_path = out_dir / f"model_step{t}.npz"
            store_path = out_dir / f"prototypes_step{t}.txt"
            save_checkpoint(net, ckpt_path)
            save_store(prev_store, store_path)

        per_class = evaluate_model(net, test_volumes, schedule.seen(t))
        report = aggregate_metrics(per_class, schedule, t, cfg.method)
        say(f"[{cfg.method}] step {t}: old={report.old_dsc:.3f} "
            f"new={'-' if report.new_dsc is None else f'{report.new_dsc:.3f}'} "
            f"all={report.all_dsc:.3f}")
        records.append(StepRecord(t, step_classes, report, ckpt_path, store_path))
        for c, score in sorted(report.per_class.items()):
            metrics_rows.append((t, c, score, cfg.method))
        summary_rows.append((t, cfg.method, report.old_dsc, report.new_dsc,
                             report.all_dsc))

    if out_dir is not None:
        report_mod.write_metrics_csv(metrics_rows, out_dir / "metrics.csv")
        report_mod.write_summary_csv(summary_rows, out_dir / "summary.csv")
        report_mod.render_summary_figure(summary_rows, out_dir / "summary.svg")

    return RunResult(cfg, schedule, records, out_dir)
