"""Sequential mask propagation, desk-scale training, and the scaling bench.

Per frame: encode -> deformable self-attention -> motion enrichment of
queries/keys -> deformable cross-attention against the previous frame ->
dense long-term readout from the memory bank -> fusion -> decode -> argmax.
Frame 0 seeds the memory with the ground-truth mask embedding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import PyramidLayout, flow_to_tokens, pyramid_to_tokens, tokens_to_pyramid
from .decoder import crop_logits, logits_to_mask
from .encoders import ObjectMask, padded_hw, pad_bottom_right, shuffle_channels
from .errors import InputError, TrainingError, UsageError
from .flow import FlowField, add_flow_noise
from .memory import MemoryBank
from .model import ModelConfig, SegmentationModel
from .nn import Adam
from .tensor import Tensor


@dataclass
class AblationFlags:
    """Inference-time feature gates; disabling zeroes the branch."""

    flow_offsets: bool = True
    qk_flow: bool = True
    long_term: bool = True
    multi_scale: bool = True

    KNOWN = ("flow-offsets", "qk-flow", "long-term", "multi-scale")

    @staticmethod
    def from_disabled(names) -> "AblationFlags":
        flags = AblationFlags()
        for raw in names or []:
            name = raw.strip()
            if name not in AblationFlags.KNOWN:
                raise InputError(f"unknown ablation switch '{name}' (known: {', '.join(AblationFlags.KNOWN)})")
            setattr(flags, name.replace("-", "_"), False)
        return flags

    def to_dict(self) -> dict:
        return {k.replace("_", "-"): getattr(self, k) for k in
                ("flow_offsets", "qk_flow", "long_term", "multi_scale")}


@dataclass
class PropagationTrace:
    masks: dict  # frame index (>= 1) -> ObjectMask
    frame_times: list
    bank_sizes: list


def _pad_flow(field: FlowField, ph: int, pw: int) -> FlowField:
    if field.shape == (ph, pw):
        return field
    return FlowField(
        pad_bottom_right(field.u, ph, pw), pad_bottom_right(field.v, ph, pw), field.direction
    )


def _sequence_flows(sequence, mode: str, seed: int):
    """Yield (F_dir, F_inv) per adjacent pair according to the flow source."""
    if mode not in ("oracle", "files") and not mode.startswith("noisy"):
        raise InputError(f"unknown flow mode '{mode}'")
    if sequence.flows is None or len(sequence.flows) != len(sequence.frames) - 1:
        raise InputError(
            f"flow mode '{mode}' needs per-pair flow fields on the sequence "
            "(generate them synthetically or load .flo files)"
        )
    if mode.startswith("noisy"):
        _, _, sig = mode.partition(":")
        sigma = float(sig) if sig else 1.0
        rng = np.random.default_rng(seed)
        return [
            (add_flow_noise(d, sigma, rng), add_flow_noise(i, sigma, rng))
            for d, i in sequence.flows
        ]
    return list(sequence.flows)


class _FrameState:
    """Everything the next frame needs from the previous one."""

    def __init__(self, tokens, mask_tokens):
        self.tokens = tokens  # post-self-attention tokens [P, C]
        self.mask_tokens = mask_tokens  # mask embedding tokens [P, C]


def _encode_frame(model: SegmentationModel, frame: np.ndarray, layout: PyramidLayout,
                  flags: AblationFlags):
    enc_pyr = model.image_encoder(frame)
    tokens = pyramid_to_tokens(enc_pyr)
    tokens = model.self_attn(tokens, tokens, tokens, None, None, layout,
                             own_scale_only=not flags.multi_scale)
    return enc_pyr, tokens


def _mask_tokens(model: SegmentationModel, mask: ObjectMask) -> Tensor:
    return pyramid_to_tokens(model.mask_encoder(mask))


def _match_frame(model: SegmentationModel, layout: PyramidLayout, enc_pyr, tokens,
                 prev: _FrameState, f_dir: FlowField, f_inv: FlowField,
                 bank: MemoryBank, flags: AblationFlags, hw: tuple[int, int]):
    """Short-term + long-term matching, fusion, and decoding for one frame."""
    ph, pw = padded_hw(*hw)
    f_dir = _pad_flow(f_dir, ph, pw)
    f_inv = _pad_flow(f_inv, ph, pw)
    finv_tokens = Tensor(flow_to_tokens(f_inv, layout))
    fdir_tokens = Tensor(flow_to_tokens(f_dir, layout))

    q_tokens, k_tokens = tokens, prev.tokens
    if flags.qk_flow:
        q_tokens, k_tokens = model.qk_enrich(q_tokens, k_tokens, finv_tokens, fdir_tokens)
    short = model.cross_attn(
        q_tokens, k_tokens, prev.tokens, prev.mask_tokens, finv_tokens, layout,
        disable_flow_offsets=not flags.flow_offsets,
        own_scale_only=not flags.multi_scale,
    )
    if flags.long_term and len(bank) > 0:
        long_tokens = model.long_term(tokens, layout, bank)
    else:
        long_tokens = Tensor(np.zeros(short.data.shape, dtype=short.data.dtype))
    fused = model.fusion(short, long_tokens, tokens)
    motion = pyramid_to_tokens(model.flow_embed(f_inv))
    fused = T.add(fused, motion)
    logits = model.decoder(tokens_to_pyramid(fused, layout), enc_pyr)
    return crop_logits(logits, hw[0], hw[1])


def propagate(model: SegmentationModel, sequence, flow_mode: str = "oracle",
              flags: AblationFlags | None = None, seed: int = 0) -> PropagationTrace:
    """Run sequential propagation from the frame-0 annotation."""
    flags = flags or AblationFlags()
    n = len(sequence)
    if n == 1:
        return PropagationTrace({}, [], [1])
    flows = _sequence_flows(sequence, flow_mode, seed)
    h, w = sequence.size
    layout = PyramidLayout.for_input(h, w, model.config.strides)
    bank = MemoryBank(model.config.memory_capacity, model.config.memorize_every)
    masks: dict[int, ObjectMask] = {}
    times: list[float] = []
    bank_sizes: list[int] = []

    with T.no_grad():
        t0 = time.perf_counter()
        _, tokens = _encode_frame(model, sequence.frames[0], layout, flags)
        gt0 = sequence.annotations[0]
        mask_tokens = _mask_tokens(model, gt0)
        bank.maybe_memorize(0, model.long_term.build_entry(0, tokens, mask_tokens, layout))
        prev = _FrameState(tokens, mask_tokens)
        times.append(time.perf_counter() - t0)
        bank_sizes.append(len(bank))

        for t in range(1, n):
            t1 = time.perf_counter()
            f_dir, f_inv = flows[t - 1]
            enc_pyr, tokens = _encode_frame(model, sequence.frames[t], layout, flags)
            logits = _match_frame(model, layout, enc_pyr, tokens, prev, f_dir, f_inv,
                                  bank, flags, (h, w))
            mask = logits_to_mask(logits)
            masks[t] = mask
            mask_tokens = _mask_tokens(model, mask)
            bank.maybe_memorize(t, model.long_term.build_entry(t, tokens, mask_tokens, layout))
            prev = _FrameState(tokens, mask_tokens)
            times.append(time.perf_counter() - t1)
            bank_sizes.append(len(bank))
    return PropagationTrace(masks, times, bank_sizes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _clip_loss(model: SegmentationModel, layout: PyramidLayout, sequence, start: int,
               perm_seed: int, flags: AblationFlags):
    """Cross-entropy over a 3-frame clip.

    The previous-frame mask fed to later clip frames is the model's own
    prediction (as at inference and as the memory policy stores), so the
    propagation loop trains under its test-time input distribution.
    """
    h, w = sequence.size
    needed = [start, start + 1, start + 2]
    for t in needed:
        if t not in sequence.annotations:
            raise InputError(f"training clip needs ground truth for frame {t}")
    shuffled = {}
    perm = None
    for t in needed:
        m, perm = _shuffle_with_shared_perm(sequence.annotations[t], perm, perm_seed)
        shuffled[t] = m

    bank = MemoryBank(model.config.memory_capacity, model.config.memorize_every)
    _, tokens0 = _encode_frame(model, sequence.frames[start], layout, flags)
    mask_tokens0 = _mask_tokens(model, shuffled[start])
    bank.insert(model.long_term.build_entry(0, tokens0, mask_tokens0, layout))
    prev = _FrameState(tokens0, mask_tokens0)

    losses = []
    for t in needed[1:]:
        f_dir, f_inv = sequence.flows[t - 1]
        enc_pyr, tokens = _encode_frame(model, sequence.frames[t], layout, flags)
        logits = _match_frame(model, layout, enc_pyr, tokens, prev, f_dir, f_inv,
                              bank, flags, (h, w))
        losses.append(T.cross_entropy(logits, shuffled[t].labels.astype(np.int64)))
        with T.no_grad():
            predicted = logits_to_mask(logits.detach())
        prev = _FrameState(tokens, _mask_tokens(model, predicted))
    total = T.mul(T.add(losses[0], losses[1]), 0.5)
    return total


def _shuffle_with_shared_perm(mask: ObjectMask, perm, seed: int):
    from .encoders import NUM_OBJECT_CHANNELS

    if perm is None:
        rng = np.random.default_rng(seed)
        perm = np.concatenate([[0], rng.permutation(np.arange(1, NUM_OBJECT_CHANNELS + 1))]).astype(np.int64)
    return ObjectMask(perm[mask.labels]), perm


def train_toy(model: SegmentationModel, sequences, steps: int, lr: float = 1e-3,
              seed: int = 0, flags: AblationFlags | None = None,
              log_every: int = 0) -> list[float]:
    """Optimize per-pixel cross-entropy over random 3-frame clips.

    Uses cosine decay from lr to lr/10 over the run. Mutates the model in
    place and returns the per-step loss series.
    """
    flags = flags or AblationFlags()
    if not sequences:
        raise InputError("train_toy needs at least one sequence")
    for seq in sequences:
        if seq.flows is None:
            raise InputError(f"sequence '{seq.name}' has no flow fields; training needs them")
        if len(seq) < 3:
            raise InputError(f"sequence '{seq.name}' is too short for 3-frame clips")
    optimizer = Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    layouts = {}
    losses: list[float] = []
    floor = lr / 10.0
    for step in range(steps):
        seq = sequences[int(rng.integers(0, len(sequences)))]
        start = int(rng.integers(0, len(seq) - 2))
        h, w = seq.size
        if (h, w) not in layouts:
            layouts[(h, w)] = PyramidLayout.for_input(h, w, model.config.strides)
        try:
            loss = _clip_loss(model, layouts[(h, w)], seq, start,
                              perm_seed=int(rng.integers(0, 2**31 - 1)), flags=flags)
        except InputError as exc:
            if "non-finite" in str(exc):
                raise TrainingError(f"forward pass diverged: {exc}", step=step) from exc
            raise
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged to {value}", step=step)
        optimizer.zero_grad()
        T.backward(loss)
        optimizer.lr = floor + (lr - floor) * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
        optimizer.step()
        losses.append(value)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"step {step + 1:5d}  loss {recent:.4f}")
    return losses


# ---------------------------------------------------------------------------
# scaling bench
# ---------------------------------------------------------------------------


def _dense_global_attention(q_tokens: Tensor, k_tokens: Tensor, v_tokens: Tensor) -> Tensor:
    """Global matching reference: softmax affinity over every source token."""
    C = q_tokens.shape[1]
    logits = T.mul(T.matmul(q_tokens, T.transpose(k_tokens, (1, 0))), 1.0 / np.sqrt(C))
    return T.matmul(T.softmax(logits, axis=-1), v_tokens)


def bench(sizes=(64, 128, 256), reps: int = 5, config: ModelConfig | None = None,
          seed: int = 0) -> dict:
    """Median per-frame wall time of the deformable matcher vs dense matching.

    Returns per-size timings plus log-log scaling exponents in pixel count.
    """
    results = {"sizes": list(sizes), "deformable": [], "dense": [],
               "deformable_var": [], "dense_var": [], "reps": reps}
    for size in sizes:
        cfg = config or ModelConfig(max_hw=(size, size), seed=seed)
        if cfg.max_hw[0] < size or cfg.max_hw[1] < size:
            cfg = ModelConfig(**{**cfg.__dict__, "max_hw": (size, size)})
        model = SegmentationModel(cfg)
        rng = np.random.default_rng(seed)
        layout = PyramidLayout.for_input(size, size, cfg.strides)
        P, C = layout.total, cfg.embed_dim
        tokens = Tensor(rng.standard_normal((P, C)).astype(np.float32))
        prev = Tensor(rng.standard_normal((P, C)).astype(np.float32))
        mask_tok = Tensor(rng.standard_normal((P, C)).astype(np.float32))
        flow_tok = Tensor((rng.standard_normal((P, 2)) * 0.5).astype(np.float32))
        # spread sampling everywhere so gather cost is realistic
        model.cross_attn.sem_head.weight.data = (
            rng.standard_normal(model.cross_attn.sem_head.weight.shape) * 0.3
        ).astype(np.float32)

        def run_deformable():
            with T.no_grad():
                model.cross_attn(tokens, prev, prev, mask_tok, flow_tok, layout)

        def run_dense():
            with T.no_grad():
                _dense_global_attention(tokens, prev, prev)

        for name, fn in (("deformable", run_deformable), ("dense", run_dense)):
            fn()  # warmup
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn()
                samples.append(time.perf_counter() - t0)
            results[name].append(float(np.median(samples)))
            results[f"{name}_var"].append(float(np.var(samples)))

    pixels = np.array([padded_hw(s, s)[0] * padded_hw(s, s)[1] for s in sizes], dtype=np.float64)
    for name in ("deformable", "dense"):
        times = np.array(results[name])
        slope = np.polyfit(np.log(pixels), np.log(times), 1)[0]
        results[f"{name}_exponent"] = float(slope)
    return results


def bench_table(results: dict) -> str:
    rows = [("size", "pixels", "deformable [s]", "dense [s]")]
    for i, s in enumerate(results["sizes"]):
        ph, pw = padded_hw(s, s)
        rows.append((str(s), str(ph * pw), f"{results['deformable'][i]:.4f}",
                     f"{results['dense'][i]:.4f}"))
    rows.append(("exponent", "", f"{results['deformable_exponent']:.2f}",
                 f"{results['dense_exponent']:.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(c.rjust(widths[i]) for i, c in enumerate(row)) for row in rows)
