"""Long-term feature memory: a bounded FIFO of memorized frames with a
pinned first entry, dense global readout over stride-16/32 tokens, and the
fusion of short-term and long-term matching results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import PyramidLayout
from .errors import InputError, ShapeError, UsageError
from .nn import Linear, Module
from .tensor import Tensor

MEMORY_LEVELS = (1, 2)  # strides 16 and 32


@dataclass
class MemoryEntry:
    frame_index: int
    keys: Tensor  # [M, C] stride-16/32 feature tokens
    values: Tensor  # [M, C] image + mask embedding tokens

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ShapeError(f"memory keys {self.keys.shape} vs values {self.values.shape}")

    @property
    def token_count(self) -> int:
        return self.keys.shape[0]


class MemoryBank:
    """FIFO of memorized frames; the frame-0 entry is never evicted."""

    def __init__(self, capacity: int = 16, memorize_every: int = 5):
        if capacity < 1:
            raise InputError("memory capacity must be at least 1")
        self.capacity = capacity
        self.memorize_every = memorize_every
        self.entries: list[MemoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def insert(self, entry: MemoryEntry) -> None:
        if entry.frame_index in self.frame_indices:
            raise UsageError(f"frame {entry.frame_index} is already memorized")
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            for i, e in enumerate(self.entries):
                if e.frame_index != 0:
                    del self.entries[i]
                    break
            else:
                del self.entries[0]

    def maybe_memorize(self, frame_index: int, entry: MemoryEntry) -> bool:
        """Insert per the inference policy: frame 0 and every Nth frame."""
        if frame_index != 0 and frame_index % self.memorize_every != 0:
            return False
        self.insert(entry)
        return True

    def stacked(self) -> tuple[Tensor, Tensor]:
        if not self.entries:
            raise UsageError("memory bank is empty")
        keys = T.concat([e.keys for e in self.entries], axis=0)
        values = T.concat([e.values for e in self.entries], axis=0)
        return keys, values


def memory_tokens(tokens: Tensor, layout: PyramidLayout) -> Tensor:
    """Select the stride-16/32 rows of a flattened token matrix."""
    start, _ = layout.level_slice(MEMORY_LEVELS[0])
    length = sum(layout.counts[lvl] for lvl in MEMORY_LEVELS)
    return T.narrow(tokens, 0, start, length)


class LongTermReadout(Module):
    """Dense multi-head cross-attention from current tokens to all memory tokens."""

    def __init__(self, embed_dim: int, heads: int, rng: np.random.Generator):
        if embed_dim % heads:
            raise ShapeError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        self.embed_dim = embed_dim
        self.heads = heads
        self.q_proj = Linear(embed_dim, embed_dim, rng)
        self.k_proj = Linear(embed_dim, embed_dim, rng)
        self.v_proj = Linear(embed_dim, embed_dim, rng)
        self.mask_lift = Linear(embed_dim, embed_dim, rng)
        self.out_proj = Linear(embed_dim, embed_dim, rng)

    def compose_values(self, feat_tokens: Tensor, mask_tokens: Tensor) -> Tensor:
        """Image + projected mask embedding, the token content entries store."""
        return T.add(feat_tokens, self.mask_lift(mask_tokens))

    def build_entry(self, frame_index: int, tokens: Tensor, mask_tokens: Tensor,
                    layout: PyramidLayout) -> MemoryEntry:
        feat = memory_tokens(tokens, layout)
        mask = memory_tokens(mask_tokens, layout)
        return MemoryEntry(frame_index, keys=feat, values=self.compose_values(feat, mask))

    def _attend(self, q_tokens: Tensor, bank: MemoryBank) -> tuple[Tensor, np.ndarray]:
        keys, values = bank.stacked()
        Mq = q_tokens.shape[0]
        Mk = keys.shape[0]
        heads, d = self.heads, self.embed_dim // self.heads
        q = T.reshape(self.q_proj(q_tokens), (Mq, heads, d))
        k = T.reshape(self.k_proj(keys), (Mk, heads, d))
        v = T.reshape(self.v_proj(values), (Mk, heads, d))
        outs = []
        weights = np.zeros((Mq, heads, Mk), dtype=np.float64)
        for h in range(heads):
            q_h = T.reshape(T.narrow(q, 1, h, 1), (Mq, d))
            k_h = T.reshape(T.narrow(k, 1, h, 1), (Mk, d))
            v_h = T.reshape(T.narrow(v, 1, h, 1), (Mk, d))
            logits = T.mul(T.matmul(q_h, T.transpose(k_h, (1, 0))), 1.0 / np.sqrt(d))
            w = T.softmax(logits, axis=-1)
            weights[:, h] = w.data
            outs.append(T.matmul(w, v_h))
        out = self.out_proj(T.concat(outs, axis=1))
        return out, weights

    def __call__(self, tokens: Tensor, layout: PyramidLayout, bank: MemoryBank) -> Tensor:
        """Token-level readout: stride-8 rows pass through unchanged."""
        if len(bank) == 0:
            raise UsageError("long-term readout requires a non-empty memory bank")
        q = memory_tokens(tokens, layout)
        out, _ = self._attend(q, bank)
        n8 = layout.counts[0]
        level8 = T.narrow(tokens, 0, 0, n8)
        return T.concat([level8, out], axis=0)

    def readout_weights(self, tokens: Tensor, layout: PyramidLayout, bank: MemoryBank) -> np.ndarray:
        with T.no_grad():
            _, w = self._attend(memory_tokens(tokens, layout), bank)
        return w


class FusionBlock(Module):
    """Concat short- and long-term tokens, project back to C, add the query residual."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, zero_init: bool = False):
        self.proj = Linear(2 * embed_dim, embed_dim, rng, zero_init=zero_init)

    def __call__(self, short_tokens: Tensor, long_tokens: Tensor, residual_tokens: Tensor) -> Tensor:
        if short_tokens.shape != long_tokens.shape or short_tokens.shape != residual_tokens.shape:
            raise ShapeError(
                f"fusion inputs disagree: {short_tokens.shape}, {long_tokens.shape}, {residual_tokens.shape}"
            )
        both = T.concat([short_tokens, long_tokens], axis=1)
        return T.add(self.proj(both), residual_tokens)
