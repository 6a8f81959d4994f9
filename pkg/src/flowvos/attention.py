"""Multi-head, multi-scale deformable attention over feature pyramids.

Every query carries one reference point per scale (its own grid coordinate
rescaled to that scale). Sampling locations are reference + semantic offset
(predicted from the projected query, bounded by a per-scale window via tanh)
+ motion offset (predicted from inverse optical flow, bounded by the scale's
spatial extent). Keys and values are bilinearly sampled from the previous
frame at those locations and attended to with ordinary softmax(QK^T/sqrt(d))
weights, so the cost is linear in query count x heads x scales x offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError, UsageError
from .nn import Linear, Module
from .tensor import Tensor

NEG_MASK = -1e30


@dataclass
class AttentionConfig:
    embed_dim: int = 128
    heads: int = 4
    n_offsets: int = 4  # sampling points per head per scale
    window_base: float = 4.0  # semantic window at the finest stride, in that level's pixels
    strides: tuple[int, ...] = (8, 16, 32)
    normalize_offsets: bool = True  # tanh-bounded offsets (ablation knob)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.n_offsets < 1:
            raise InputError("n_offsets must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def window(self, scale: int) -> float:
        """Semantic offset bound for a sampled scale, in that level's pixels."""
        return self.window_base * (self.strides[scale] / self.strides[0])


class PyramidLayout:
    """Token bookkeeping for a flattened multi-level pyramid."""

    def __init__(self, level_hw: list[tuple[int, int]], strides: tuple[int, ...] = (8, 16, 32)):
        self.level_hw = [tuple(hw) for hw in level_hw]
        self.strides = tuple(strides)
        self.counts = [h * w for h, w in self.level_hw]
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
        self.total = int(self.offsets[-1])
        levels = []
        centers = []
        for lvl, (h, w) in enumerate(self.level_hw):
            ys, xs = np.mgrid[0:h, 0:w]
            u = (xs.reshape(-1) + 0.5) / w
            v = (ys.reshape(-1) + 0.5) / h
            centers.append(np.stack([u, v], axis=1))
            levels.append(np.full(h * w, lvl, dtype=np.int64))
        self.token_level = np.concatenate(levels)
        self.token_stride = np.array(self.strides)[self.token_level].astype(np.float64)
        self.centers = np.concatenate(centers)  # [P, 2] normalized (u, v)
        # reference points: one (x, y) per token per sampled scale, in that
        # scale's own pixel grid
        self.refs = []
        for h, w in self.level_hw:
            x = self.centers[:, 0] * w - 0.5
            y = self.centers[:, 1] * h - 0.5
            self.refs.append(np.stack([x, y], axis=1).astype(np.float32))

    @staticmethod
    def for_input(h: int, w: int, strides: tuple[int, ...] = (8, 16, 32)) -> "PyramidLayout":
        from .encoders import padded_hw

        ph, pw = padded_hw(h, w)
        return PyramidLayout([(ph // s, pw // s) for s in strides], strides)

    def level_slice(self, level: int) -> tuple[int, int]:
        return int(self.offsets[level]), int(self.counts[level])


def pyramid_to_tokens(pyramid: list[Tensor]) -> Tensor:
    """Stack flattened [C, H, W] levels into a [P_total, C] token matrix."""
    rows = []
    for level in pyramid:
        c = level.shape[0]
        rows.append(T.transpose(T.reshape(level, (c, -1)), (1, 0)))
    return T.concat(rows, axis=0)


def tokens_to_pyramid(tokens: Tensor, layout: PyramidLayout) -> list[Tensor]:
    out = []
    c = tokens.shape[1]
    for lvl, (h, w) in enumerate(layout.level_hw):
        start, count = layout.level_slice(lvl)
        rows = T.narrow(tokens, 0, start, count)
        out.append(T.reshape(T.transpose(rows, (1, 0)), (c, h, w)))
    return out


def flow_to_tokens(field, layout: PyramidLayout) -> np.ndarray:
    """Pool an input-resolution flow field onto every level's token grid.

    Displacements come out in each token's own level-pixel units; [P, 2].
    """
    from .flow import pool_to_stride

    rows = []
    for lvl, stride in enumerate(layout.strides):
        pooled = pool_to_stride(field, stride)  # [Hl, Wl, 2]
        h, w = layout.level_hw[lvl]
        if pooled.shape[:2] != (h, w):
            raise ShapeError(f"flow level {lvl} is {pooled.shape[:2]}, pyramid expects {(h, w)}")
        rows.append(pooled.reshape(-1, 2))
    return np.concatenate(rows, axis=0)


class QKFlowEnrich(Module):
    """Additive motion enrichment of queries and keys from projected flow.

    Queries take the inverse flow (current frame grid), keys the direct flow
    (previous frame grid). Zero-initialized, so enrichment starts as exact
    identity.
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        self.query_lift = Linear(2, embed_dim, rng, zero_init=True)
        self.key_lift = Linear(2, embed_dim, rng, zero_init=True)

    def __call__(self, q_tokens: Tensor, k_tokens: Tensor,
                 flow_inv_tokens: Tensor, flow_dir_tokens: Tensor) -> tuple[Tensor, Tensor]:
        flow_inv_tokens = T.as_tensor(flow_inv_tokens)
        flow_dir_tokens = T.as_tensor(flow_dir_tokens)
        if flow_inv_tokens.shape[0] != q_tokens.shape[0]:
            raise InputError(
                f"inverse flow tokens ({flow_inv_tokens.shape[0]}) do not match queries ({q_tokens.shape[0]})"
            )
        if flow_dir_tokens.shape[0] != k_tokens.shape[0]:
            raise InputError(
                f"direct flow tokens ({flow_dir_tokens.shape[0]}) do not match keys ({k_tokens.shape[0]})"
            )
        q_m = T.add(q_tokens, self.query_lift(flow_inv_tokens))
        k_m = T.add(k_tokens, self.key_lift(flow_dir_tokens))
        return q_m, k_m


class DeformableAttention(Module):
    """Shared machinery for cross-frame and within-frame deformable attention.

    with_flow enables the flow-offset branch (cross-frame only); with_mask
    adds a projected mask embedding into the value source.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 with_flow: bool, with_mask: bool):
        self.cfg = cfg
        self.with_flow = with_flow
        self.with_mask = with_mask
        C = cfg.embed_dim
        n_out = cfg.heads * len(cfg.strides) * cfg.n_offsets * 2
        self.q_proj = Linear(C, C, rng)
        self.k_proj = Linear(C, C, rng)
        self.v_proj = Linear(C, C, rng)
        if with_mask:
            self.mask_proj = Linear(C, C, rng)
        self.sem_head = Linear(C, n_out, rng, zero_init=True)
        if with_flow:
            self.flow_head = Linear(2, n_out, rng, zero_init=True)
        self.out_proj = Linear(C, C, rng)
        self.ffn1 = Linear(C, 2 * C, rng)
        self.ffn2 = Linear(2 * C, C, rng)
        # test fixture: bypass the linear flow head and emit offsets equal to
        # the flow itself (analytic tanh inversion); never used in training
        self.flow_passthrough = False

    # -- offset branches --------------------------------------------------

    def semantic_offsets(self, q_projected: Tensor, layout: PyramidLayout) -> Tensor:
        """[P, C] projected queries -> [P, heads, scales, n_offsets, 2] offsets."""
        cfg = self.cfg
        P = q_projected.shape[0]
        raw = self.sem_head(q_projected)
        raw = T.reshape(raw, (P, cfg.heads, len(cfg.strides), cfg.n_offsets, 2))
        if not cfg.normalize_offsets:
            return raw
        sigma = np.array([cfg.window(s) for s in range(len(cfg.strides))], dtype=np.float32)
        return T.mul(T.tanh(raw), Tensor(sigma.reshape(1, 1, -1, 1, 1)))

    def flow_offsets(self, flow_tokens: Tensor, layout: PyramidLayout) -> Tensor:
        """[P, 2] level-unit inverse flow -> [P, heads, scales, n_offsets, 2]."""
        cfg = self.cfg
        flow_tokens = T.as_tensor(flow_tokens)
        P = flow_tokens.shape[0]
        if P != layout.total:
            raise InputError(f"flow tokens ({P}) do not cover the pyramid ({layout.total})")
        n_scales = len(cfg.strides)
        extent = np.array(
            [[w, h] for h, w in layout.level_hw], dtype=np.float32
        ).reshape(1, 1, n_scales, 1, 2)
        if self.flow_passthrough:
            # offsets equal the flow converted to each sampled scale's pixels
            per_scale = np.stack(
                [
                    flow_tokens.data * (layout.token_stride / cfg.strides[s])[:, None]
                    for s in range(n_scales)
                ],
                axis=1,
            )  # [P, S, 2]
            data = np.broadcast_to(
                per_scale[:, None, :, None, :], (P, cfg.heads, n_scales, cfg.n_offsets, 2)
            ).astype(np.float32)
            return Tensor(data.copy())
        raw = self.flow_head(flow_tokens)
        raw = T.reshape(raw, (P, cfg.heads, n_scales, cfg.n_offsets, 2))
        if not cfg.normalize_offsets:
            return raw
        return T.mul(T.tanh(raw), Tensor(extent))

    # -- attention ---------------------------------------------------------

    def __call__(self, q_tokens: Tensor, k_tokens: Tensor, v_tokens: Tensor,
                 mask_tokens: Tensor | None, flow_tokens: Tensor | None,
                 layout: PyramidLayout, disable_flow_offsets: bool = False,
                 own_scale_only: bool = False) -> Tensor:
        """Attend current-frame tokens to sampled source-frame tokens.

        q_tokens: [P, C] queries (already motion-enriched when applicable);
        k_tokens / v_tokens: [P, C] source features for keys and values;
        mask_tokens: optional [P, C] mask embedding merged into values.
        Returns [P, C] block output (attention + residual + feed-forward).
        """
        if k_tokens is None or v_tokens is None:
            raise UsageError(
                "cross-frame attention needs a previous frame; the first frame "
                "must bypass to the memory-only path"
            )
        cfg = self.cfg
        P = layout.total
        heads, d = cfg.heads, cfg.head_dim
        n_scales = len(cfg.strides)
        K = cfg.n_offsets

        q = self.q_proj(q_tokens)  # [P, C]
        offsets = self.semantic_offsets(q, layout)
        if self.with_flow and flow_tokens is not None and not disable_flow_offsets:
            offsets = T.add(offsets, self.flow_offsets(flow_tokens, layout))

        k_src = self.k_proj(k_tokens)
        v_in = v_tokens
        if self.with_mask and mask_tokens is not None:
            v_in = T.add(v_tokens, self.mask_proj(mask_tokens))
        v_src = self.v_proj(v_in)
        k_maps = tokens_to_pyramid(k_src, layout)
        v_maps = tokens_to_pyramid(v_src, layout)

        q3 = T.reshape(q, (P, heads, d))
        scale_mask = None
        if own_scale_only:
            allowed = np.repeat(layout.token_level[:, None], n_scales * K, axis=1)
            key_scale = np.repeat(np.arange(n_scales), K)[None, :]
            scale_mask = np.where(allowed == key_scale, 0.0, NEG_MASK).astype(np.float32)

        head_outputs = []
        inv_sqrt_d = 1.0 / np.sqrt(d)
        for h in range(heads):
            q_h = T.reshape(T.narrow(q3, 1, h, 1), (P, 1, d))
            logits_parts = []
            value_parts = []
            for s in range(n_scales):
                pts = T.narrow(T.narrow(offsets, 1, h, 1), 2, s, 1)  # [P,1,1,K,2]
                pts = T.add(T.reshape(pts, (P, K, 2)), Tensor(layout.refs[s].reshape(P, 1, 2)))
                flat_pts = T.reshape(pts, (P * K, 2))
                k_map_h = T.narrow(k_maps[s], 0, h * d, d)
                v_map_h = T.narrow(v_maps[s], 0, h * d, d)
                k_smp = T.reshape(T.bilinear_sample(k_map_h, flat_pts), (P, K, d))
                v_smp = T.reshape(T.bilinear_sample(v_map_h, flat_pts), (P, K, d))
                logits_parts.append(T.mul(T.tsum(T.mul(q_h, k_smp), axis=-1), inv_sqrt_d))
                value_parts.append(v_smp)
            logits = T.concat(logits_parts, axis=1)  # [P, S*K]
            if scale_mask is not None:
                logits = T.add(logits, Tensor(scale_mask))
            weights = T.softmax(logits, axis=-1)
            values = T.concat(value_parts, axis=1)  # [P, S*K, d]
            attended = T.tsum(T.mul(T.reshape(weights, (P, n_scales * K, 1)), values), axis=1)
            head_outputs.append(attended)

        attn = self.out_proj(T.concat(head_outputs, axis=1))
        y = T.add(q_tokens, attn)
        z = T.add(y, self.ffn2(T.relu(self.ffn1(y))))
        return z

    def sampling_points(self, q_tokens: Tensor, flow_tokens: Tensor | None,
                        layout: PyramidLayout, disable_flow_offsets: bool = False) -> np.ndarray:
        """Absolute sampling locations, [P, heads, scales, n_offsets, 2] (diagnostics)."""
        cfg = self.cfg
        with T.no_grad():
            offsets = self.semantic_offsets(self.q_proj(q_tokens), layout)
            if self.with_flow and flow_tokens is not None and not disable_flow_offsets:
                offsets = T.add(offsets, self.flow_offsets(flow_tokens, layout))
            pts = offsets.data.copy()
        for s in range(len(cfg.strides)):
            pts[:, :, s] += layout.refs[s][:, None, None, :]
        return pts

    def attention_weights(self, q_tokens, k_tokens, flow_tokens, layout,
                          disable_flow_offsets: bool = False) -> np.ndarray:
        """Per-query softmax weights, [P, heads, scales*n_offsets] (diagnostics)."""
        cfg = self.cfg
        P, heads, d = layout.total, cfg.heads, cfg.head_dim
        K, n_scales = cfg.n_offsets, len(cfg.strides)
        with T.no_grad():
            q = self.q_proj(q_tokens)
            offsets = self.semantic_offsets(q, layout)
            if self.with_flow and flow_tokens is not None and not disable_flow_offsets:
                offsets = T.add(offsets, self.flow_offsets(flow_tokens, layout))
            k_maps = tokens_to_pyramid(self.k_proj(k_tokens), layout)
            q3 = T.reshape(q, (P, heads, d))
            all_w = np.zeros((P, heads, n_scales * K), dtype=np.float64)
            for h in range(heads):
                q_h = T.reshape(T.narrow(q3, 1, h, 1), (P, 1, d))
                parts = []
                for s in range(n_scales):
                    pts = T.narrow(T.narrow(offsets, 1, h, 1), 2, s, 1)
                    pts = T.add(T.reshape(pts, (P, K, 2)), Tensor(layout.refs[s].reshape(P, 1, 2)))
                    k_map_h = T.narrow(k_maps[s], 0, h * d, d)
                    k_smp = T.reshape(T.bilinear_sample(k_map_h, T.reshape(pts, (P * K, 2))), (P, K, d))
                    parts.append(T.mul(T.tsum(T.mul(q_h, k_smp), axis=-1), 1.0 / np.sqrt(d)))
                all_w[:, h] = T.softmax(T.concat(parts, axis=1), axis=-1).data
        return all_w


def cross_attention_block(cfg: AttentionConfig, rng: np.random.Generator) -> DeformableAttention:
    """Previous-frame matching block: flow offsets + mask-aware values."""
    return DeformableAttention(cfg, rng, with_flow=True, with_mask=True)


def self_attention_block(cfg: AttentionConfig, rng: np.random.Generator) -> DeformableAttention:
    """Within-frame block: offsets from queries only, image values only."""
    return DeformableAttention(cfg, rng, with_flow=False, with_mask=False)
