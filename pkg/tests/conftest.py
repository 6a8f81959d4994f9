"""Shared fixtures; the trained checkpoints are expensive and session-scoped."""

import time

import numpy as np
import pytest

from flowvos.dataio import gen_synthetic
from flowvos.metrics import evaluate_sequence
from flowvos.model import ModelConfig, SegmentationModel
from flowvos.pipeline import propagate, train_toy


def _report(model, seq, **kw):
    trace = propagate(model, seq, **kw)
    gt = {t: seq.annotations[t] for t in trace.masks}
    return evaluate_sequence(trace.masks, gt, sequence=seq.name)


@pytest.fixture(scope="session")
def translation_overfit():
    """Criterion-4 fixture: textured square moving (4, 0)/frame, 20 frames."""
    seq = gen_synthetic({
        "name": "xlate", "height": 64, "width": 128, "frames": 20, "seed": 11,
        "shapes": [{"kind": "square", "size": 28, "center": [24, 32],
                    "motion": {"kind": "translation", "velocity": [4, 0]},
                    "texture_cell": 2.0, "texture_contrast": 0.5}],
        "background_contrast": 0.2,
    })
    config = ModelConfig(embed_dim=64, heads=4, n_offsets=4,
                         backbone_widths=(16, 32, 64, 64, 64), mask_hidden=(16, 32),
                         flow_hidden=8, max_hw=(64, 128), seed=1)
    model = SegmentationModel(config)
    start = time.perf_counter()
    losses = train_toy(model, [seq], steps=500, lr=2.5e-3, seed=1)
    train_seconds = time.perf_counter() - start
    return {"model": model, "sequence": seq, "losses": losses,
            "train_seconds": train_seconds, "report": _report(model, seq)}


@pytest.fixture(scope="session")
def suite_model():
    """Shared checkpoint for the ablation-direction and flow-robustness checks.

    The fast suite moves two identical-texture squares faster than the
    semantic window covers (10 px/frame = 1.25 stride-8 pixels > window 1.0),
    so appearance matching alone is ambiguous and flow carries the binding.
    """
    fast = gen_synthetic({
        "name": "fast", "height": 64, "width": 96, "frames": 8, "seed": 21,
        "shapes": [
            {"kind": "square", "size": 18, "center": [14, 24], "texture_seed": 77,
             "motion": {"kind": "translation", "velocity": [10, 0]}},
            {"kind": "square", "size": 18, "center": [82, 44], "texture_seed": 77,
             "motion": {"kind": "translation", "velocity": [-10, 0]}},
        ],
    })
    standard = gen_synthetic({
        "name": "standard", "height": 64, "width": 96, "frames": 10, "seed": 22,
        "shapes": [
            {"kind": "square", "size": 16, "center": [20, 20],
             "motion": {"kind": "translation", "velocity": [3, 1]}},
            {"kind": "disk", "size": 14, "center": [60, 44],
             "motion": {"kind": "translation", "velocity": [-2, 0]}},
        ],
    })
    config = ModelConfig(embed_dim=64, heads=4, n_offsets=4, window_base=1.0,
                         backbone_widths=(16, 32, 64, 64, 64), mask_hidden=(16, 32),
                         flow_hidden=8, max_hw=(64, 96), seed=0)
    model = SegmentationModel(config)
    train_toy(model, [fast, standard], steps=500, lr=2e-3, seed=0)
    return {"model": model, "fast": fast, "standard": standard}
