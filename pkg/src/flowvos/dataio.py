"""Sequence containers, DAVIS-style directory IO, and synthetic scenes.

Synthetic sequences carry exact per-frame masks and exact per-pair flow
fields: every shape's pose at frame t is a world-frame step transform applied
t times, so masks, textures, and flows all derive from the same closed-form
motion.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import NUM_OBJECT_CHANNELS, ObjectMask
from .errors import InputError
from .flow import AffineTransform, FlowField, invert_flow, synth_flow, write_flo, read_flo

IMAGE_DIR = "JPEGImages"
ANNOTATION_DIR = "Annotations"
FLOW_DIR = "flow"


def davis_palette() -> bytes:
    """Standard 256-entry indexed-PNG palette (VOC bit-shuffle colormap)."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c = i
        r = g = b = 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette[i] = (r, g, b)
    return palette.tobytes()


@dataclass
class Sequence:
    name: str
    frames: list  # HxWx3 uint8 arrays
    annotations: dict  # frame index -> ObjectMask
    flows: list | None = None  # per adjacent pair: (F_dir, F_inv)

    def __post_init__(self):
        if not self.frames:
            raise InputError(f"sequence '{self.name}' has no frames")
        hw = self.frames[0].shape[:2]
        for i, f in enumerate(self.frames):
            if f.shape[:2] != hw:
                raise InputError(f"frame {i} size {f.shape[:2]} differs from {hw}")
        if 0 not in self.annotations:
            raise InputError(f"sequence '{self.name}' is missing the frame-0 annotation")
        for idx, mask in self.annotations.items():
            if mask.shape != hw:
                raise InputError(f"annotation {idx} size {mask.shape} differs from frames {hw}")
        if self.flows is not None and len(self.flows) not in (0, len(self.frames) - 1):
            raise InputError(
                f"expected {len(self.frames) - 1} flow pairs, got {len(self.flows)}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


def _frame_index(path: Path) -> int:
    m = re.search(r"(\d+)$", path.stem)
    if m is None:
        raise InputError(f"cannot parse a frame index from '{path.name}'")
    return int(m.group(1))


def _find_sequence_dir(base: Path, name: str | None) -> Path:
    """Resolve <base>/<seq> or <base>/<resolution>/<seq> (DAVIS convention)."""
    if not base.is_dir():
        raise InputError(f"missing directory {base}")
    subdirs = sorted(p for p in base.iterdir() if p.is_dir())

    def has_files(p: Path) -> bool:
        return any(f.is_file() for f in p.iterdir())

    if name is not None:
        if (base / name).is_dir():
            return base / name
        for sub in subdirs:
            if (sub / name).is_dir():
                return sub / name
        raise InputError(f"sequence '{name}' not found under {base}")
    candidates = [p for p in subdirs if has_files(p)]
    if len(candidates) == 1:
        return candidates[0]
    nested = [q for p in subdirs for q in sorted(p.iterdir()) if q.is_dir() and has_files(q)]
    if len(candidates) == 0 and len(nested) == 1:
        return nested[0]
    raise InputError(f"ambiguous layout under {base}; pass the sequence name")


def _read_mask(path: Path) -> ObjectMask:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise InputError(f"{path}: annotations must be indexed-palette or grayscale PNG")
    return ObjectMask(np.array(img, dtype=np.int64))


def load_sequence(root, name: str | None = None) -> Sequence:
    """Load a DAVIS-layout sequence directory.

    Accepts both `root/JPEGImages/<seq>/` and `root/JPEGImages/<res>/<seq>/`
    layouts; annotations (and an optional flow/ mirror of forward .flo files)
    follow the same relative path.
    """
    root = Path(root)
    seq_dir = _find_sequence_dir(root / IMAGE_DIR, name)
    rel = seq_dir.relative_to(root / IMAGE_DIR)
    frame_files = sorted(
        (p for p in seq_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png")),
        key=_frame_index,
    )
    if not frame_files:
        raise InputError(f"no frames in {seq_dir}")
    frames = [np.array(Image.open(p).convert("RGB")) for p in frame_files]

    ann_dir = root / ANNOTATION_DIR / rel
    annotations: dict[int, ObjectMask] = {}
    if ann_dir.is_dir():
        for p in sorted(ann_dir.glob("*.png"), key=_frame_index):
            annotations[_frame_index(p)] = _read_mask(p)
    if 0 not in annotations:
        raise InputError(f"missing frame-0 annotation under {ann_dir}")

    flows = None
    flow_dir = root / FLOW_DIR / rel
    if flow_dir.is_dir():
        flow_files = sorted(flow_dir.glob("*.flo"), key=_frame_index)
        if flow_files:
            if len(flow_files) != len(frames) - 1:
                raise InputError(
                    f"{flow_dir}: expected {len(frames) - 1} flow files, found {len(flow_files)}"
                )
            flows = []
            for p in flow_files:
                f_dir = read_flo(p, direction="direct")
                flows.append((f_dir, invert_flow(f_dir)))
    return Sequence(seq_dir.name, frames, annotations, flows)


def save_sequence(seq: Sequence, root) -> Path:
    """Write DAVIS layout: JPEGImages/, Annotations/ and flow/ (forward .flo)."""
    root = Path(root)
    img_dir = root / IMAGE_DIR / seq.name
    ann_dir = root / ANNOTATION_DIR / seq.name
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        Image.fromarray(frame).save(img_dir / f"{i:05d}.png")
    palette = davis_palette()
    for idx, mask in sorted(seq.annotations.items()):
        img = Image.fromarray(mask.labels, mode="P")
        img.putpalette(palette)
        img.save(ann_dir / f"{idx:05d}.png")
    if seq.flows:
        flow_dir = root / FLOW_DIR / seq.name
        flow_dir.mkdir(parents=True, exist_ok=True)
        for i, (f_dir, _) in enumerate(seq.flows):
            write_flo(flow_dir / f"{i:05d}.flo", f_dir)
    return root


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _noise_texture(rng: np.random.Generator, h: int, w: int, cell: float, base: float, contrast: float) -> np.ndarray:
    """Smooth RGB noise in [0,1]: coarse noise bilinearly upsampled."""
    gh = max(2, int(np.ceil(h / cell)) + 1)
    gw = max(2, int(np.ceil(w / cell)) + 1)
    coarse = rng.random((gh, gw, 3))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x0 + 1] * wx
    bot = coarse[y0 + 1][:, x0] * (1 - wx) + coarse[y0 + 1][:, x0 + 1] * wx
    tex = top * (1 - wy) + bot * wy
    return np.clip(base + contrast * (tex - 0.5) * 2.0, 0.0, 1.0)


def _sample_texture(tex: np.ndarray, pts_x: np.ndarray, pts_y: np.ndarray) -> np.ndarray:
    h, w = tex.shape[:2]
    x = np.clip(pts_x, 0, w - 1)
    y = np.clip(pts_y, 0, h - 1)
    x0 = np.floor(x).astype(int).clip(0, max(w - 2, 0))
    y0 = np.floor(y).astype(int).clip(0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    top = tex[y0, x0] * (1 - wx) + tex[y0, x1] * wx
    bot = tex[y1, x0] * (1 - wx) + tex[y1, x1] * wx
    return top * (1 - wy) + bot * wy


class _Shape:
    def __init__(self, spec: dict, index: int, h: int, w: int, rng: np.random.Generator):
        self.kind = spec.get("kind", "square")
        if self.kind not in ("square", "rect", "disk"):
            raise InputError(f"unknown shape kind '{self.kind}'")
        self.center = np.array(spec.get("center", [w / 2, h / 2]), dtype=np.float64)
        size = spec.get("size", 16)
        if self.kind == "rect":
            self.half = np.array([spec.get("width", size) / 2, spec.get("height", size) / 2])
        else:
            self.half = np.array([size / 2, size / 2])
        motion = spec.get("motion", {"kind": "translation", "velocity": [0, 0]})
        mk = motion.get("kind", "translation")
        if mk == "translation":
            vx, vy = motion.get("velocity", [0, 0])
            self.step = AffineTransform.translation(float(vx), float(vy))
        elif mk == "rotation":
            c = motion.get("center", list(self.center))
            self.step = AffineTransform.rotation(float(motion.get("degrees_per_frame", 0.0)), (c[0], c[1]))
        elif mk == "scaling":
            c = motion.get("center", list(self.center))
            self.step = AffineTransform.scaling(float(motion.get("factor_per_frame", 1.0)), (c[0], c[1]))
        else:
            raise InputError(f"unknown motion kind '{mk}'")
        tex_seed = spec.get("texture_seed")
        tex_rng = np.random.default_rng(int(tex_seed)) if tex_seed is not None else rng
        self.texture = _noise_texture(
            tex_rng, h, w, cell=float(spec.get("texture_cell", 3.0)),
            base=float(spec.get("texture_base", 0.55)), contrast=float(spec.get("texture_contrast", 0.45)),
        )

    def pose(self, t: int) -> AffineTransform:
        out = AffineTransform.translation(0.0, 0.0)
        for _ in range(t):
            out = self.step.compose(out)
        return out

    def occupancy(self, t: int, grid: np.ndarray) -> np.ndarray:
        base = self.pose(t).inverse().apply(grid)
        rel = base - self.center
        if self.kind == "disk":
            return (rel[..., 0] / self.half[0]) ** 2 + (rel[..., 1] / self.half[1]) ** 2 <= 1.0
        return (np.abs(rel[..., 0]) <= self.half[0]) & (np.abs(rel[..., 1]) <= self.half[1])

    def colors(self, t: int, grid: np.ndarray) -> np.ndarray:
        base = self.pose(t).inverse().apply(grid)
        return _sample_texture(self.texture, base[..., 0], base[..., 1])


def gen_synthetic(spec: dict) -> Sequence:
    """Render a deterministic multi-shape sequence with exact masks and flows.

    Spec keys: height, width, frames, seed, name, shapes[]; each shape takes
    kind/size/center/motion and optional texture knobs. Later shapes render
    in front of earlier ones.
    """
    h = int(spec.get("height", 64))
    w = int(spec.get("width", 64))
    T_total = int(spec.get("frames", 5))
    seed = int(spec.get("seed", 0))
    shapes_spec = spec.get("shapes", [])
    if len(shapes_spec) > NUM_OBJECT_CHANNELS:
        raise InputError(f"at most {NUM_OBJECT_CHANNELS} shapes supported, got {len(shapes_spec)}")
    if T_total < 1:
        raise InputError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    background = _noise_texture(
        rng, h, w, cell=float(spec.get("background_cell", 6.0)),
        base=float(spec.get("background_base", 0.4)), contrast=float(spec.get("background_contrast", 0.25)),
    )
    shapes = [_Shape(s, i, h, w, rng) for i, s in enumerate(shapes_spec)]

    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)

    frames, annotations = [], {}
    owners_per_frame = []
    for t in range(T_total):
        labels = np.zeros((h, w), dtype=np.uint8)
        img = background.copy()
        for i, shape in enumerate(shapes):
            occ = shape.occupancy(t, grid)
            labels[occ] = i + 1  # later shapes overwrite: z-ordered front
            img[occ] = shape.colors(t, grid)[occ]
        owners_per_frame.append(labels.copy())
        frames.append((img * 255.0).round().astype(np.uint8))
        annotations[t] = ObjectMask(labels)

    flows = []
    for t in range(T_total - 1):
        f_dir_u = np.zeros((h, w), dtype=np.float32)
        f_dir_v = np.zeros((h, w), dtype=np.float32)
        f_inv_u = np.zeros((h, w), dtype=np.float32)
        f_inv_v = np.zeros((h, w), dtype=np.float32)
        for i, shape in enumerate(shapes):
            d_dir, d_inv = synth_flow(shape.step, h, w)
            sel = owners_per_frame[t] == i + 1
            f_dir_u[sel] = d_dir.u[sel]
            f_dir_v[sel] = d_dir.v[sel]
            sel_next = owners_per_frame[t + 1] == i + 1
            f_inv_u[sel_next] = d_inv.u[sel_next]
            f_inv_v[sel_next] = d_inv.v[sel_next]
        flows.append(
            (FlowField(f_dir_u, f_dir_v, "direct"), FlowField(f_inv_u, f_inv_v, "inverse"))
        )

    return Sequence(str(spec.get("name", "synthetic")), frames, annotations, flows)


def load_spec(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
