"""Region similarity J, boundary accuracy F, and sequence-level reports."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .encoders import ObjectMask
from .errors import ShapeError


def _binary(mask: ObjectMask | np.ndarray, object_id: int) -> np.ndarray:
    labels = mask.labels if isinstance(mask, ObjectMask) else np.asarray(mask)
    return labels == object_id


def region_j(pred, gt, object_id: int) -> float:
    """Intersection-over-union of one object's binary masks.

    Both empty counts as a perfect 1.0 (official toolkit convention); exactly
    one empty is 0.0.
    """
    p = _binary(pred, object_id)
    g = _binary(gt, object_id)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """4-connected morphological gradient: mask XOR its erosion."""
    if not mask.any():
        return np.zeros_like(mask)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def _disk(radius: int) -> np.ndarray:
    if radius < 1:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius**2


def boundary_f(pred, gt, object_id: int, tolerance_px: int | None = None) -> float:
    """Boundary F-measure under dilation-based matching.

    The match radius defaults to 0.8% of the image diagonal, rounded up; pass
    tolerance_px for a fixed absolute radius.
    """
    p = _binary(pred, object_id)
    g = _binary(gt, object_id)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    if tolerance_px is None:
        h, w = p.shape
        tolerance_px = int(np.ceil(0.008 * np.sqrt(h * h + w * w)))
    pb = _boundary(p)
    gb = _boundary(g)
    footprint = _disk(tolerance_px)
    gb_dilated = ndimage.binary_dilation(gb, structure=footprint)
    pb_dilated = ndimage.binary_dilation(pb, structure=footprint)
    precision = (pb & gb_dilated).sum() / pb.sum()
    recall = (gb & pb_dilated).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class EvalReport:
    sequence: str
    object_ids: list
    per_frame_j: dict  # object id -> list of per-frame J
    per_frame_f: dict  # object id -> list of per-frame F
    run_config: dict = field(default_factory=dict)

    @property
    def j_per_object(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.per_frame_j.items()}

    @property
    def f_per_object(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.per_frame_f.items()}

    @property
    def j_mean(self) -> float:
        return float(np.mean(list(self.j_per_object.values())))

    @property
    def f_mean(self) -> float:
        return float(np.mean(list(self.f_per_object.values())))

    @property
    def jf_mean(self) -> float:
        return (self.j_mean + self.f_mean) / 2.0

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence,
            "J_mean": self.j_mean,
            "F_mean": self.f_mean,
            "JF_mean": self.jf_mean,
            "J_per_object": {str(k): v for k, v in self.j_per_object.items()},
            "F_per_object": {str(k): v for k, v in self.f_per_object.items()},
            "per_frame": {
                "J": {str(k): list(map(float, v)) for k, v in self.per_frame_j.items()},
                "F": {str(k): list(map(float, v)) for k, v in self.per_frame_f.items()},
            },
            "run_config": self.run_config,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        rows = [("object", "J", "F", "J&F")]
        for k in self.object_ids:
            j, f = self.j_per_object[k], self.f_per_object[k]
            rows.append((str(k), f"{j:.4f}", f"{f:.4f}", f"{(j + f) / 2:.4f}"))
        rows.append(("mean", f"{self.j_mean:.4f}", f"{self.f_mean:.4f}", f"{self.jf_mean:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        return "\n".join(lines)


def evaluate_sequence(predictions: dict, ground_truth: dict, sequence: str = "",
                      object_ids: list | None = None, threads: int = 1,
                      run_config: dict | None = None) -> EvalReport:
    """Score predicted masks against ground truth, frame by frame.

    predictions / ground_truth: frame index -> ObjectMask; only frames present
    in both are scored (frame 0 is conventionally excluded by the caller).
    """
    frames = sorted(set(predictions) & set(ground_truth))
    if object_ids is None:
        ids = set()
        for t in frames:
            ids.update(ground_truth[t].object_ids())
        if not ids and frames:
            ids = set(ground_truth[frames[0]].object_ids())
        object_ids = sorted(ids) or [1]

    def score(t):
        js = {k: region_j(predictions[t], ground_truth[t], k) for k in object_ids}
        fs = {k: boundary_f(predictions[t], ground_truth[t], k) for k in object_ids}
        return t, js, fs

    per_j = {k: [] for k in object_ids}
    per_f = {k: [] for k in object_ids}
    if threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, frames))
    else:
        results = [score(t) for t in frames]
    for _, js, fs in sorted(results, key=lambda r: r[0]):
        for k in object_ids:
            per_j[k].append(js[k])
            per_f[k].append(fs[k])
    return EvalReport(sequence, list(object_ids), per_j, per_f, run_config or {})
