"""Image and mask encoders producing aligned 3-level feature pyramids.

Levels sit at strides 8/16/32 of the (padded) input and share one embedding
width after linear projection. Learnable per-position and per-level
embeddings are added once here, so both the short-term and the long-term
matching branches see them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .nn import Conv2d, Module
from .tensor import Tensor

STRIDES = (8, 16, 32)
NUM_OBJECT_CHANNELS = 15
MIN_SIDE = 8
PAD_MULTIPLE = 32

Pyramid = list  # 3 Tensors of shape [C, H/8, W/8], [C, H/16, W/16], [C, H/32, W/32]


@dataclass
class ObjectMask:
    """Per-pixel object labels; 0 is background, 1..15 are object channels."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InputError(f"mask labels must be HxW, got shape {lab.shape}")
        if lab.min() < 0 or lab.max() > NUM_OBJECT_CHANNELS:
            raise InputError(
                f"mask labels must lie in [0, {NUM_OBJECT_CHANNELS}], got range "
                f"[{lab.min()}, {lab.max()}]"
            )
        self.labels = lab.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def onehot(self) -> np.ndarray:
        """[15, H, W] binary channels; channel k-1 is active iff labels == k."""
        h, w = self.labels.shape
        out = np.zeros((NUM_OBJECT_CHANNELS, h, w), dtype=np.float32)
        for k in range(1, NUM_OBJECT_CHANNELS + 1):
            out[k - 1] = self.labels == k
        return out

    def object_ids(self) -> list[int]:
        return sorted(int(k) for k in np.unique(self.labels) if k != 0)


def shuffle_channels(mask: ObjectMask, rng: np.random.Generator | int) -> tuple[ObjectMask, np.ndarray]:
    """Remap labels by a uniform random permutation of {1..15}; background stays.

    Returns the shuffled mask and the permutation array `perm` of length 16
    with perm[0] == 0, such that new_label = perm[old_label].
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    perm = np.concatenate([[0], rng.permutation(np.arange(1, NUM_OBJECT_CHANNELS + 1))]).astype(np.int64)
    return ObjectMask(perm[mask.labels]), perm


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def identity_bank(embed_dim: int) -> np.ndarray:
    """Fixed orthonormal channel embeddings, [15, embed_dim].

    The mask encoder adds these to its output and the decoder reads logits
    back out with the same matrix, so object identity survives the matching
    pipeline as a linear rider instead of having to be re-learned as an
    arbitrary rotation. Deterministic in embed_dim; not a trained parameter.
    Rows are orthonormal when the embedding is wide enough, unit-norm random
    otherwise (micro configs below 15 channels).
    """
    rng = np.random.default_rng(0x1D5EED)
    if embed_dim >= NUM_OBJECT_CHANNELS:
        q = np.linalg.qr(rng.standard_normal((embed_dim, NUM_OBJECT_CHANNELS)))[0]
        return q[:, :NUM_OBJECT_CHANNELS].T.astype(np.float32)
    rows = rng.standard_normal((NUM_OBJECT_CHANNELS, embed_dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


def padded_hw(h: int, w: int) -> tuple[int, int]:
    if h < MIN_SIDE or w < MIN_SIDE:
        raise InputError(f"frame {h}x{w} below the minimum side of {MIN_SIDE}")
    ph = -(-h // PAD_MULTIPLE) * PAD_MULTIPLE
    pw = -(-w // PAD_MULTIPLE) * PAD_MULTIPLE
    return ph, pw


def pad_bottom_right(arr: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the two leading spatial axes to (ph, pw)."""
    h, w = arr.shape[:2]
    widths = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (arr.ndim - 2)
    if ph == h and pw == w:
        return arr
    return np.pad(arr, widths)


def level_sizes(h: int, w: int) -> list[tuple[int, int]]:
    ph, pw = padded_hw(h, w)
    return [(ph // s, pw // s) for s in STRIDES]


class ImageEncoder(Module):
    """Strided conv backbone + per-level projection into the shared space."""

    def __init__(self, embed_dim: int, rng: np.random.Generator,
                 widths: tuple[int, ...] = (16, 32, 64, 128, 256),
                 max_hw: tuple[int, int] = (64, 96)):
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.max_hw = padded_hw(*max_hw)
        w0, w1, w2, w3, w4 = self.widths
        self.stem = Conv2d(3, w0, 3, rng, stride=2)
        self.stage1 = Conv2d(w0, w1, 3, rng, stride=2)
        self.stage2 = Conv2d(w1, w2, 3, rng, stride=2)
        self.stage3 = Conv2d(w2, w3, 3, rng, stride=2)
        self.stage4 = Conv2d(w3, w4, 3, rng, stride=2)
        self.proj = [Conv2d(c, embed_dim, 1, rng) for c in (w2, w3, w4)]
        mh, mw = self.max_hw
        self.pos_embed = [
            Tensor((rng.normal(0.0, 0.02, size=(embed_dim, mh // s, mw // s))).astype(np.float32), requires_grad=True)
            for s in STRIDES
        ]
        self.scale_embed = [
            Tensor((rng.normal(0.0, 0.02, size=(embed_dim,))).astype(np.float32), requires_grad=True)
            for _ in STRIDES
        ]

    def add_level_embeddings(self, level: int, x: Tensor) -> Tensor:
        """Add the positional table crop and the per-level embedding vector."""
        c, h, w = x.shape
        table = self.pos_embed[level]
        if h > table.shape[1] or w > table.shape[2]:
            raise InputError(
                f"level {level} size {h}x{w} exceeds the configured positional table "
                f"{table.shape[1]}x{table.shape[2]}"
            )
        pos = T.narrow(T.narrow(table, 1, 0, h), 2, 0, w)
        scale = T.reshape(self.scale_embed[level], (c, 1, 1))
        return T.add(T.add(x, pos), scale)

    def __call__(self, frame: np.ndarray) -> Pyramid:
        """RGB frame [H, W, 3] (uint8 or float in [0,1]) -> 3-level pyramid."""
        frame = np.asarray(frame)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise InputError(f"expected an HxWx3 frame, got shape {frame.shape}")
        ph, pw = padded_hw(frame.shape[0], frame.shape[1])
        if frame.dtype == np.uint8:
            frame = frame.astype(np.float32) / 255.0
        frame = pad_bottom_right(frame.astype(np.float32), ph, pw)
        x = Tensor(np.ascontiguousarray(frame.transpose(2, 0, 1)))
        x = T.relu(self.stem(x))
        x = T.relu(self.stage1(x))
        f8 = T.relu(self.stage2(x))
        f16 = T.relu(self.stage3(f8))
        f32 = T.relu(self.stage4(f16))
        pyramid = []
        for level, feat in enumerate((f8, f16, f32)):
            projected = self.proj[level](feat)
            pyramid.append(self.add_level_embeddings(level, projected))
        return pyramid


class MaskEncoder(Module):
    """Strided conv stack turning 15-channel one-hot masks into the pyramid space.

    A fixed identity-bank branch (level-pooled one-hot times the orthonormal
    channel embeddings) is added at every level so the object label is
    carried linearly alongside the learned shape features.
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, int] = (16, 32), identity_gain: float = 2.0):
        self.embed_dim = embed_dim
        self.identity_gain = identity_gain
        self._bank = identity_bank(embed_dim)  # [15, C], fixed
        h1, h2 = hidden
        self.conv1 = Conv2d(NUM_OBJECT_CHANNELS, h1, 3, rng, stride=2)
        self.conv2 = Conv2d(h1, h2, 3, rng, stride=2)
        self.conv3 = Conv2d(h2, embed_dim, 3, rng, stride=2)
        self.down16 = Conv2d(embed_dim, embed_dim, 3, rng, stride=2)
        self.down32 = Conv2d(embed_dim, embed_dim, 3, rng, stride=2)

    def first_layer(self, onehot: np.ndarray) -> Tensor:
        return self.conv1(Tensor(onehot))

    def __call__(self, mask: ObjectMask) -> Pyramid:
        ph, pw = padded_hw(*mask.shape)
        onehot = pad_bottom_right(mask.onehot().transpose(1, 2, 0), ph, pw).transpose(2, 0, 1)
        onehot = np.ascontiguousarray(onehot)
        x = T.relu(self.first_layer(onehot))
        x = T.relu(self.conv2(x))
        m8 = self.conv3(x)
        m16 = self.down16(T.relu(m8))
        m32 = self.down32(T.relu(m16))
        out = []
        for level, stride in zip((m8, m16, m32), STRIDES):
            hl, wl = ph // stride, pw // stride
            pooled = onehot.reshape(NUM_OBJECT_CHANNELS, hl, stride, wl, stride).mean(axis=(2, 4))
            rider = self._bank.T @ (self.identity_gain * pooled.reshape(NUM_OBJECT_CHANNELS, -1))
            out.append(T.add(level, Tensor(rider.reshape(self.embed_dim, hl, wl).astype(np.float32))))
        return out
