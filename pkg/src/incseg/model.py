"""Small volumetric segmentation network with an expandable classifier head.

Three padding-preserving spatial convolutions produce K-channel penultimate
features; a per-voxel linear head maps them to one logit per seen class plus
background. In flat-depth mode (D == 1) the kernels are 3x3x1 so the same
code serves fast 2-D experiments.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Array


class CheckpointError(Exception):
    """Raised when a parameter checkpoint cannot be read back."""


def _init_conv(rng, c_out, c_in, kernel):
    fan_in = c_in * int(np.prod(kernel))
    lim = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-lim, lim, size=(c_out, c_in) + tuple(kernel))
    b = np.zeros(c_out)
    return Array(w, requires_grad=True), Array(b, requires_grad=True)


class SegNet:
    """Encoder (3 conv layers, K channels) plus linear head K -> n_classes+1."""

    def __init__(self, feature_dim=16, n_classes=1, kernel_depth=3, seed=0,
                 nonlinearity="relu", _init=True):
        if kernel_depth not in (1, 3):
            raise ValueError("kernel_depth must be 1 or 3")
        if nonlinearity not in ("relu", "tanh"):
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.kernel = (3, 3, kernel_depth)
        self.nonlinearity = nonlinearity
        self._idx_cache = {}
        if _init:
            rng = np.random.default_rng(seed)
            k = feature_dim
            self.conv_w, self.conv_b = [], []
            for c_in, c_out in ((1, k), (k, k), (k, k)):
                w, b = _init_conv(rng, c_out, c_in, self.kernel)
                self.conv_w.append(w)
                self.conv_b.append(b)
            lim = 1.0 / np.sqrt(k)
            self.head_w = Array(rng.uniform(-lim, lim, size=(n_classes + 1, k)),
                                requires_grad=True)
            self.head_b = Array(np.zeros(n_classes + 1), requires_grad=True)

    @property
    def head_width(self) -> int:
        return self.n_classes + 1

    def parameters(self) -> list[Array]:
        return [*self.conv_w, *self.conv_b, self.head_w, self.head_b]

    def copy(self, requires_grad=True) -> "SegNet":
        dup = SegNet(self.feature_dim, self.n_classes, self.kernel[2],
                     nonlinearity=self.nonlinearity, _init=False)
        dup.conv_w = [Array(w.data.copy(), requires_grad=requires_grad) for w in self.conv_w]
        dup.conv_b = [Array(b.data.copy(), requires_grad=requires_grad) for b in self.conv_b]
        dup.head_w = Array(self.head_w.data.copy(), requires_grad=requires_grad)
        dup.head_b = Array(self.head_b.data.copy(), requires_grad=requires_grad)
        return dup

    def _gather_indices(self, shape):
        """Flat indices into the zero-padded input realizing the im2col gather."""
        key = shape
        cached = self._idx_cache.get(key)
        if cached is not None:
            return cached
        b, c, h, w, d = shape
        kh, kw, kd = self.kernel
        ph, pw, pd = kh // 2, kw // 2, kd // 2
        hp, wp, dp = h + 2 * ph, w + 2 * pw, d + 2 * pd
        # rows ordered (c, kh, kw, kd) to match a C-order kernel reshape
        bi = np.arange(b)[:, None, None, None]
        hi = np.arange(h)[None, :, None, None]
        wi = np.arange(w)[None, None, :, None]
        di = np.arange(d)[None, None, None, :]
        base = (((bi * c) * hp + hi) * wp + wi) * dp + di  # (B,H,W,D), channel 0 offset
        base = base.reshape(1, -1)  # (1, B*V)
        offs = []
        for ci in range(c):
            for oh in range(kh):
                for ow in range(kw):
                    for od in range(kd):
                        offs.append(((ci * hp + oh) * wp + ow) * dp + od)
        offs = np.asarray(offs, dtype=np.int64)[:, None]  # (C*kvol, 1)
        idx = base + offs
        pad = ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd))
        self._idx_cache[key] = (idx, pad)
        return idx, pad

    def _conv(self, x: Array, w: Array, b: Array) -> Array:
        bsz, c, h, wd, d = x.shape
        idx, pad = self._gather_indices(x.shape)
        padded = ad.pad_zero(x, pad)
        cols = ad.take_flat(padded, idx)                      # (C*kvol, B*V)
        w2 = w.reshape((w.shape[0], -1))
        out = ad.matmul(w2, cols) + b.reshape((-1, 1))        # (Cout, B*V)
        out = out.reshape((w.shape[0], bsz, h, wd, d))
        return out.moveaxis(0, 1)

    def forward(self, volume: np.ndarray) -> tuple[Array, Array]:
        """Run the network; returns (features, logits).

        volume: (B, 1, H, W, D). Features are the penultimate activations
        (B, K, H, W, D); logits are (B, n_classes+1, H, W, D).
        """
        vol = np.asarray(volume, dtype=np.float64)
        if vol.ndim != 5 or vol.shape[1] != 1:
            raise ValueError(f"expected volume (B,1,H,W,D), got {vol.shape}")
        # receptive field of the 3-conv stack is 7 along any convolved axis
        _, _, h, w, d = vol.shape
        if h < 7 or w < 7 or (self.kernel[2] == 3 and d < 7):
            raise ValueError(f"spatial dims {vol.shape[2:]} below receptive field")
        act = ad.relu if self.nonlinearity == "relu" else ad.tanh
        x = Array(vol)
        for cw, cb in zip(self.conv_w, self.conv_b):
            x = act(self._conv(x, cw, cb))
        features = x
        bsz, k, h, w, d = features.shape
        fmat = features.moveaxis(1, 0).reshape((k, bsz * h * w * d))
        logits = ad.matmul(self.head_w, fmat) + self.head_b.reshape((-1, 1))
        logits = logits.reshape((self.head_width, bsz, h, w, d)).moveaxis(0, 1)
        return features, logits


class ModelSnapshot:
    """Frozen deep copy of a SegNet; produces identical outputs on every call."""

    def __init__(self, net: SegNet, step: int):
        self._net = net.copy(requires_grad=False)
        self.step = step

    @property
    def feature_dim(self) -> int:
        return self._net.feature_dim

    @property
    def head_width(self) -> int:
        return self._net.head_width

    def forward(self, volume: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        features, logits = self._net.forward(volume)
        return features.data, logits.data


def snapshot_freeze(net: SegNet, step: int = 0) -> ModelSnapshot:
    return ModelSnapshot(net, step)


def expand_head(net: SegNet, n_new: int, seed: int = 0,
                bias_mode: str = "background") -> SegNet:
    """Grow the head by n_new output channels, keeping old rows bit-for-bit.

    New rows draw from uniform(-1/sqrt(K), 1/sqrt(K)); their bias copies the
    old background bias (bias_mode="background") or starts at zero.
    """
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    if bias_mode not in ("background", "zero"):
        raise ValueError(f"unknown bias_mode {bias_mode!r}")
    rng = np.random.default_rng(seed)
    grown = net.copy(requires_grad=True)
    k = net.feature_dim
    lim = 1.0 / np.sqrt(k)
    new_rows = rng.uniform(-lim, lim, size=(n_new, k))
    new_bias = np.full(n_new, net.head_b.data[0]) if bias_mode == "background" \
        else np.zeros(n_new)
    grown.head_w = Array(np.vstack([net.head_w.data, new_rows]), requires_grad=True)
    grown.head_b = Array(np.concatenate([net.head_b.data, new_bias]), requires_grad=True)
    grown.n_classes = net.n_classes + n_new
    return grown


CHECKPOINT_VERSION = 1


def save_checkpoint(net: SegNet, path) -> None:
    """Write all parameters and layout metadata as an .npz record."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "feature_dim": np.array(net.feature_dim),
        "n_classes": np.array(net.n_classes),
        "kernel_depth": np.array(net.kernel[2]),
        "nonlinearity": np.array(net.nonlinearity),
        "head_w": net.head_w.data,
        "head_b": net.head_b.data,
    }
    for i, (w, b) in enumerate(zip(net.conv_w, net.conv_b)):
        arrays[f"conv{i}_w"] = w.data
        arrays[f"conv{i}_b"] = b.data
    np.savez(path, **arrays)


def load_checkpoint(path) -> SegNet:
    try:
        with np.load(path, allow_pickle=False) as rec:
            if int(rec["version"]) != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {rec['version']}")
            net = SegNet(int(rec["feature_dim"]), int(rec["n_classes"]),
                         int(rec["kernel_depth"]),
                         nonlinearity=str(rec["nonlinearity"]), _init=False)
            net.conv_w = [Array(rec[f"conv{i}_w"], requires_grad=True) for i in range(3)]
            net.conv_b = [Array(rec[f"conv{i}_b"], requires_grad=True) for i in range(3)]
            net.head_w = Array(rec["head_w"], requires_grad=True)
            net.head_b = Array(rec["head_b"], requires_grad=True)
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if net.head_w.data.shape != (net.n_classes + 1, net.feature_dim):
        raise CheckpointError("checkpoint head shape disagrees with metadata")
    return net
