"""Feature extractor, landmark pooling, detector-parameter predictor and detectors.

Layouts: images (B, H, W); cloth-level features (B, h, w, D); labelmaps and
heatmaps (B, N_c, h, w); detector weights (N_c, D). Unbatched inputs drop the
leading B everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import derive_seed, randn_init
from .tensor import ParamSet, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    W: int = 32
    h: int = 8
    w: int = 8
    D: int = 32
    hidden: int = 64
    channels: tuple[int, ...] = (1, 16, 16, 32, 32)
    pool_after: tuple[int, ...] = (0, 1)  # layer indices followed by 2x2 average pooling
    ppnet_out_gain: float = 0.02  # shrinks the predictor's output layer at init

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.channels[0] != 1 or self.channels[-1] != self.D:
            raise ValueError(f"channels must run from 1 to D={self.D}, got {self.channels}")
        f = 2 ** len(self.pool_after)
        if self.H // f != self.h or self.W // f != self.w or self.H % f or self.W % f:
            raise ValueError(f"{len(self.pool_after)} poolings map {self.H}x{self.W} "
                             f"to {self.H // f}x{self.W // f}, not {self.h}x{self.w}")

    @property
    def conv_depth(self) -> int:
        return len(self.channels) - 1


# ---------------------------------------------------------------------------
# initialization


def init_fenet(cfg: ModelConfig, seed: int) -> ParamSet:
    entries = []
    for i, (cin, cout) in enumerate(zip(cfg.channels[:-1], cfg.channels[1:])):
        w = randn_init((cout, cin, 3, 3), fan_in=cin * 9, seed=derive_seed(seed, 1, i))
        entries += [(f"conv{i}.w", Tensor(w)), (f"conv{i}.b", Tensor(np.zeros(cout)))]
    return ParamSet(entries)


def init_ppnet(cfg: ModelConfig, seed: int) -> ParamSet:
    return ParamSet([
        ("fc0.w", Tensor(randn_init((cfg.D, cfg.hidden), cfg.D, derive_seed(seed, 2, 0)))),
        ("fc0.b", Tensor(np.zeros(cfg.hidden))),
        ("fc1.w", Tensor(cfg.ppnet_out_gain
                         * randn_init((cfg.hidden, cfg.D), cfg.hidden, derive_seed(seed, 2, 1)))),
        ("fc1.b", Tensor(np.zeros(cfg.D))),
    ])


def init_detectors(n: int, cfg: ModelConfig, seed: int) -> Tensor:
    return Tensor(randn_init((n, cfg.D), cfg.D, seed))


# ---------------------------------------------------------------------------
# forward passes


def fenet_forward(params: ParamSet, images, cfg: ModelConfig) -> Tensor:
    """Cloth-level features, (B, h, w, D) for (B, H, W) input."""
    img = T.as_tensor(images)
    single = img.ndim == 2
    if img.shape[-2:] != (cfg.H, cfg.W) or img.ndim not in (2, 3):
        raise ShapeError(f"fenet: expected (B, {cfg.H}, {cfg.W}) images, got {img.shape}")
    B = 1 if single else img.shape[0]
    x = T.reshape(img, (B, 1, cfg.H, cfg.W))
    last = cfg.conv_depth - 1
    for i in range(cfg.conv_depth):
        w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
        x = T.add(T.conv2d_same(x, w), T.reshape(b, (1, b.shape[0], 1, 1)))
        if i != last:
            x = T.relu(x)
        if i in cfg.pool_after:
            x = T.avgpool2(x)
    feats = T.transpose(x, (0, 2, 3, 1))
    return T.reshape(feats, feats.shape[1:]) if single else feats


def _batch_labelmaps(labelmaps) -> np.ndarray:
    lm = labelmaps.data if isinstance(labelmaps, Tensor) else np.asarray(labelmaps, np.float64)
    return lm[None] if lm.ndim == 3 else lm


def extract_landmark_features(features, labelmaps) -> Tensor:
    """Landmark-level features (N_c, D): labelmap-weighted cells, averaged over images."""
    F = T.as_tensor(features)
    if F.ndim == 3:
        F = T.reshape(F, (1,) + F.shape)
    if isinstance(labelmaps, (list, tuple)):
        counts = {np.shape(l)[0] for l in labelmaps}
        if len(counts) != 1:
            raise ValueError(f"support labelmaps disagree on N_c: {sorted(counts)}")
        labelmaps = np.stack(labelmaps)
    L = _batch_labelmaps(labelmaps)
    B, h, w, D = F.shape
    if L.shape[0] != B or L.shape[2:] != (h, w):
        raise ShapeError(f"labelmaps {L.shape} do not match features {F.shape}")
    N = L.shape[1]
    per_image = T.matmul(Tensor(L.reshape(B, N, h * w)), T.reshape(F, (B, h * w, D)))
    return T.scale(T.sum(per_image, axis=0), 1.0 / B)


def ppnet_forward(phi: ParamSet, fpoint) -> Tensor:
    """Detector weights (N_c, D); rows are mapped independently with shared weights."""
    fp = T.as_tensor(fpoint)
    if fp.ndim != 2 or fp.shape[1] != phi["fc0.w"].shape[0]:
        raise ShapeError(f"ppnet: expected (N, {phi['fc0.w'].shape[0]}) input, got {fp.shape}")
    hid = T.relu(T.add(T.matmul(fp, phi["fc0.w"]), phi["fc0.b"]))
    return T.add(T.matmul(hid, phi["fc1.w"]), phi["fc1.b"])


def ld_logits(omega, features) -> Tensor:
    om, F = T.as_tensor(omega), T.as_tensor(features)
    single = F.ndim == 3
    if single:
        F = T.reshape(F, (1,) + F.shape)
    B, h, w, D = F.shape
    if om.ndim != 2 or om.shape[1] != D:
        raise ShapeError(f"detectors {om.shape} do not match feature width {D}")
    logits = T.matmul(om, T.transpose(T.reshape(F, (B, h * w, D)), (0, 2, 1)))
    logits = T.reshape(logits, (B, om.shape[0], h, w))
    return T.reshape(logits, logits.shape[1:]) if single else logits


def ld_forward(omega, features) -> Tensor:
    """Heatmaps (B, N_c, h, w): 1x1 detectors then a softmax per landmark."""
    return T.spatial_softmax(ld_logits(omega, features))


def check_one_hot(labelmap: np.ndarray) -> None:
    lm = np.asarray(labelmap)
    flat = lm.reshape(lm.shape[:-2] + (-1,))
    ok = np.all((flat == 0) | (flat == 1)) and np.all(flat.sum(-1) == 1)
    if not ok:
        raise ValueError("labelmap is not one-hot per channel")


def heatmap_loss(heatmaps, labelmap) -> Tensor:
    """Mean over landmarks of ``-log p(true cell)``."""
    lm = labelmap.data if isinstance(labelmap, Tensor) else np.asarray(labelmap, np.float64)
    check_one_hot(lm)
    return T.xent_heatmap(heatmaps, lm)


def detect(heatmaps, H: int, W: int) -> np.ndarray:
    """Argmax cell per landmark (first in row-major order) mapped to its centre, as (x, y)."""
    y = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    h, w = y.shape[-2:]
    idx = np.argmax(y.reshape(y.shape[:-2] + (h * w,)), axis=-1)
    rows, cols = np.divmod(idx, w)
    return np.stack([(cols + 0.5) * W / w, (rows + 0.5) * H / h], axis=-1)


def argmax_labelmap(heatmaps) -> np.ndarray:
    """One-hot mask at each channel's argmax cell (ties to the lowest row-major index)."""
    y = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    h, w = y.shape[-2:]
    flat = y.reshape(-1, h * w)
    out = np.zeros_like(flat)
    out[np.arange(len(flat)), np.argmax(flat, axis=1)] = 1.0
    return out.reshape(y.shape)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian): b"FSLK", u32 version, u32 entry count; then per
# entry u32 name length, utf-8 name, u32 rank, u32 dims[rank], f64 payload.

MAGIC = b"FSLK"
VERSION = 1


def params_to_bytes(params: ParamSet) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(raw: bytes) -> ParamSet:
    if raw[:4] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos, entries = 12, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        entries.append((name, Tensor(data.astype(np.float64))))
    return ParamSet(entries)


def save_params(path, params: ParamSet) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamSet:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint {p}")
    return params_from_bytes(p.read_bytes())
