"""Top-down pyramid decoder producing per-object logits at input resolution.

The coarsest level is upsampled x2 and merged with the lateral projection of
the next finer level (group-normalized after each merge). The final x8
upsampling head refines staged x2 hops with light convolutions, and object
logits additionally receive a tied identity readout: the fused stride-8 map
projected through the same fixed channel bank the mask encoder embeds with,
which keeps label identity decodable without learning an inverse rotation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import NUM_OBJECT_CHANNELS, ObjectMask, identity_bank
from .errors import InputError, ShapeError
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

LOGIT_CHANNELS = NUM_OBJECT_CHANNELS + 1


class PyramidDecoder(Module):
    def __init__(self, embed_dim: int, rng: np.random.Generator, groups: int = 8,
                 zero_init_head: bool = False):
        # >= 2 channels per group, else normalizing the 1x1 coarsest level
        # degenerates to a constant and kills its gradients
        groups = min(groups, max(1, embed_dim // 2))
        self._bank = identity_bank(embed_dim)
        self.lateral = [Conv2d(embed_dim, embed_dim, 1, rng) for _ in range(3)]
        self.skip_lateral = [Conv2d(embed_dim, embed_dim, 1, rng) for _ in range(3)]
        self.norms = [GroupNorm(embed_dim, groups) for _ in range(3)]
        c1 = max(embed_dim // 2, 16)
        c2 = max(embed_dim // 4, 16)
        self.up1 = Conv2d(embed_dim, c1, 3, rng)
        self.up2 = Conv2d(c1, c2, 3, rng)
        self.head_out = Conv2d(c2, LOGIT_CHANNELS, 3, rng, zero_init=zero_init_head)
        init_scale = 0.0 if zero_init_head else 1.0
        self.id_scale = Tensor(np.array(init_scale, dtype=np.float32), requires_grad=True)

    def __call__(self, fused: list[Tensor], skip: list[Tensor]) -> Tensor:
        """fused/skip: 3-level pyramids from the same frame -> [16, H, W] logits."""
        if len(fused) != 3 or len(skip) != 3:
            raise ShapeError(f"decoder expects 3-level pyramids, got {len(fused)} and {len(skip)}")
        for f, s in zip(fused, skip):
            if f.shape != s.shape:
                raise ShapeError(f"fused level {f.shape} does not match skip level {s.shape}")
        merged = None
        for lvl in (2, 1, 0):
            lat = T.add(self.lateral[lvl](fused[lvl]), self.skip_lateral[lvl](skip[lvl]))
            if merged is not None:
                lat = T.add(lat, T.upsample_bilinear(merged, 2))
            merged = self.norms[lvl](lat)
        x = T.relu(self.up1(T.upsample_bilinear(merged, 2)))  # /4
        x = T.relu(self.up2(T.upsample_bilinear(x, 2)))  # /2
        head = self.head_out(T.upsample_bilinear(x, 2))  # /1

        c, h8, w8 = fused[0].shape
        ident = T.mul(T.matmul(Tensor(self._bank), T.reshape(fused[0], (c, h8 * w8))), self.id_scale)
        ident = T.reshape(ident, (NUM_OBJECT_CHANNELS, h8, w8))
        ident = T.concat([Tensor(np.zeros((1, h8, w8), dtype=np.float32)), ident], axis=0)
        return T.add(head, T.upsample_bilinear(ident, 8))


def logits_to_mask(logits) -> ObjectMask:
    """Per-pixel argmax; ties resolve toward the smaller class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 3 or data.shape[0] != LOGIT_CHANNELS:
        raise ShapeError(f"expected [{LOGIT_CHANNELS}, H, W] logits, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise InputError("logits contain non-finite values")
    return ObjectMask(np.argmax(data, axis=0).astype(np.uint8))


def crop_logits(logits: Tensor, h: int, w: int) -> Tensor:
    """Remove the bottom/right padding introduced before encoding."""
    return T.narrow(T.narrow(logits, 1, 0, h), 2, 0, w)
