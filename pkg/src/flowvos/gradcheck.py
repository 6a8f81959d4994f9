"""Finite-difference verification of analytic gradients.

The whole-model check runs one propagation-with-loss step of a micro model
in float64 (the library computes in whatever dtype the leaves carry), then
compares each parameter group's analytic gradient against central
differences at its largest-magnitude entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import numpy as _np

from . import tensor as T
from .attention import PyramidLayout
from .dataio import gen_synthetic
from .memory import MemoryBank
from .model import ModelConfig, SegmentationModel
from .pipeline import AblationFlags, _encode_frame, _mask_tokens, _match_frame, _FrameState


def micro_config(seed: int = 0) -> ModelConfig:
    """Smallest configuration that exercises every branch."""
    return ModelConfig(
        embed_dim=8, heads=2, n_offsets=2, window_base=2.0,
        backbone_widths=(4, 4, 8, 8, 8), mask_hidden=(4, 4), flow_hidden=4,
        max_hw=(16, 16), decoder_groups=2, seed=seed,
    )


def micro_sequence(seed: int = 0):
    seq = gen_synthetic({
        "name": "micro", "height": 16, "width": 16, "frames": 3, "seed": seed,
        "shapes": [
            {"kind": "square", "size": 7, "center": [6, 8],
             "motion": {"kind": "translation", "velocity": [1.5, 0.5]}},
        ],
    })
    # dense, spatially smooth flow: piecewise-constant object flow would park
    # entire activation plateaus of the flow embedding on relu kinks
    from .flow import AffineTransform, synth_flow

    warp = AffineTransform.rotation(4.0, center=(7.5, 7.5)).compose(
        AffineTransform.translation(1.2, 0.7)
    )
    seq.flows = [synth_flow(warp, 16, 16) for _ in range(len(seq) - 1)]
    return seq


def _loss_fn(model: SegmentationModel, sequence, layout):
    """One full propagation step with cross-entropy; smooth in the parameters.

    Deliberately avoids the training clip's predicted-mask feedback: the
    argmax inside it is discontinuous, which would invalidate central
    differences.
    """
    flags = AblationFlags()
    h, w = sequence.size
    bank = MemoryBank(model.config.memory_capacity, model.config.memorize_every)
    _, tokens0 = _encode_frame(model, sequence.frames[0], layout, flags)
    mask_tokens0 = _mask_tokens(model, sequence.annotations[0])
    bank.insert(model.long_term.build_entry(0, tokens0, mask_tokens0, layout))
    prev = _FrameState(tokens0, mask_tokens0)
    f_dir, f_inv = sequence.flows[0]
    enc_pyr, tokens = _encode_frame(model, sequence.frames[1], layout, flags)
    logits = _match_frame(model, layout, enc_pyr, tokens, prev, f_dir, f_inv,
                          bank, flags, (h, w))
    return T.cross_entropy(logits, sequence.annotations[1].labels.astype(np.int64))


def _generic_point(model: SegmentationModel, rng: np.random.Generator) -> None:
    """Move the model off its structured initialization before differencing.

    Zero-initialized offset heads would place every sampling location exactly
    on the bilinear interpolation lattice, and zero conv biases make the
    zero-padded border sit exactly on the relu kink; finite differences
    straddle those subgradient points and disagree with any one-sided choice.
    """
    for head in (model.cross_attn.sem_head, model.cross_attn.flow_head,
                 model.self_attn.sem_head):
        head.weight.data = (rng.standard_normal(head.weight.shape) * 0.3).astype(head.weight.data.dtype)
        head.bias.data = (rng.standard_normal(head.bias.shape) * 0.2).astype(head.bias.data.dtype)
    for lift in (model.qk_enrich.query_lift, model.qk_enrich.key_lift):
        lift.weight.data = (rng.standard_normal(lift.weight.shape) * 0.2).astype(lift.weight.data.dtype)
    for name, param in model.params().items():
        if name.endswith(".bias"):
            param.data = param.data + (rng.standard_normal(param.shape) * 0.05).astype(param.data.dtype)


@dataclass
class GradCheckReport:
    per_group: dict  # name -> max relative error over checked entries
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(np.isfinite(v) and v <= self.tolerance for v in self.per_group.values())

    def failures(self) -> list:
        return sorted(k for k, v in self.per_group.items() if not (np.isfinite(v) and v <= self.tolerance))

    def to_table(self) -> str:
        width = max(len(k) for k in self.per_group)
        lines = []
        for name in sorted(self.per_group):
            err = self.per_group[name]
            status = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"{name.ljust(width)}  {err:.3e}  {status}")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def model_gradcheck(config: ModelConfig | None = None, samples_per_group: int = 3,
                    h: float = 1e-4, tolerance: float = 1e-2, seed: int = 0) -> GradCheckReport:
    """Check every parameter group of the micro model against central differences."""
    cfg = config or micro_config(seed)
    model = SegmentationModel(cfg).astype(np.float64)
    _generic_point(model, np.random.default_rng(seed + 1))
    sequence = micro_sequence(seed)
    layout = PyramidLayout.for_input(*sequence.size, cfg.strides)

    model.zero_grad()
    loss = _loss_fn(model, sequence, layout)
    T.backward(loss)

    report: dict[str, float] = {}
    for name, param in model.params().items():
        grad = param.grad
        if grad is None or not np.any(grad):
            report[name] = np.inf  # dead branch: fail loudly
            continue
        flat_grad = grad.reshape(-1)
        order = np.argsort(-np.abs(flat_grad))[:samples_per_group]
        worst = 0.0
        flat_param = param.data.reshape(-1)
        for idx in order:
            err = None
            # retry with a smaller step when the interval straddles a relu or
            # interpolation kink; the limit of central differences is exact
            # on either smooth piece
            for step in (h, h / 10.0, h / 100.0):
                orig = flat_param[idx]
                flat_param[idx] = orig + step
                up = _loss_fn(model, sequence, layout).item()
                flat_param[idx] = orig - step
                down = _loss_fn(model, sequence, layout).item()
                flat_param[idx] = orig
                fd = (up - down) / (2.0 * step)
                err = _rel_err(float(flat_grad[idx]), fd)
                if err <= tolerance / 4:
                    break
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, tolerance)
