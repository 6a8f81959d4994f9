"""Dense optical flow: synthetic oracle fields, Middlebury .flo files, and
the learned multi-scale flow embedding.

A transform T maps previous-frame coordinates to current-frame coordinates.
The direct field lives on the previous frame's grid, F_dir(p) = T(p) - p;
the inverse field lives on the current frame's grid, F_inv(p) = T^-1(p) - p.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import FormatError, InputError, ShapeError
from .nn import Conv2d, Module

FLO_MAGIC = 202021.25

Direction = Literal["direct", "inverse"]


@dataclass
class FlowField:
    u: np.ndarray  # [H, W] x-displacement in input pixels
    v: np.ndarray  # [H, W] y-displacement in input pixels
    direction: Direction

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"flow components must share an HxW shape, got {self.u.shape} vs {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise InputError("flow field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def uv(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @staticmethod
    def zeros(h: int, w: int, direction: Direction = "inverse") -> "FlowField":
        return FlowField(np.zeros((h, w), np.float32), np.zeros((h, w), np.float32), direction)


# ---------------------------------------------------------------------------
# synthetic transforms
# ---------------------------------------------------------------------------


class AffineTransform:
    """p_cur = A @ [x, y, 1] with A a 2x3 matrix over pixel coordinates."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ShapeError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise InputError("affine transform is not invertible")
        self.matrix = m

    @staticmethod
    def translation(dx: float, dy: float) -> "AffineTransform":
        return AffineTransform(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]]))

    @staticmethod
    def rotation(degrees: float, center: tuple[float, float]) -> "AffineTransform":
        t = np.deg2rad(degrees)
        cx, cy = center
        c, s = np.cos(t), np.sin(t)
        # rotate about (cx, cy)
        return AffineTransform(
            np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
        )

    @staticmethod
    def scaling(factor: float, center: tuple[float, float]) -> "AffineTransform":
        cx, cy = center
        return AffineTransform(np.array([[factor, 0.0, cx * (1 - factor)], [0.0, factor, cy * (1 - factor)]]))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "AffineTransform":
        a = self.matrix[:, :2]
        b = self.matrix[:, 2]
        ainv = np.linalg.inv(a)
        return AffineTransform(np.concatenate([ainv, (-ainv @ b)[:, None]], axis=1))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other: p -> self(other(p))."""
        a1, b1 = self.matrix[:, :2], self.matrix[:, 2]
        a2, b2 = other.matrix[:, :2], other.matrix[:, 2]
        return AffineTransform(np.concatenate([a1 @ a2, (a1 @ b2 + b1)[:, None]], axis=1))


class PiecewiseDeformation:
    """Smooth sinusoidal warp; inverse obtained by fixed-point iteration."""

    def __init__(self, amplitude: float, wavelength: float, phase: tuple[float, float] = (0.0, 0.0)):
        if amplitude * 2.0 * np.pi / wavelength >= 1.0:
            raise InputError("deformation too strong to stay invertible")
        self.amplitude = float(amplitude)
        self.wavelength = float(wavelength)
        self.phase = phase

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        k = 2.0 * np.pi / self.wavelength
        dx = self.amplitude * np.sin(k * pts[..., 1] + self.phase[0])
        dy = self.amplitude * np.sin(k * pts[..., 0] + self.phase[1])
        return pts + np.stack([dx, dy], axis=-1)

    def apply_inverse(self, pts: np.ndarray, iters: int = 10) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        q = pts.copy()
        for _ in range(iters):
            q = pts - (self.apply(q) - q)
        return q


Transform = AffineTransform | PiecewiseDeformation


def _grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(np.float64)  # [H, W, 2] as (x, y)


def synth_flow(transform: Transform, h: int, w: int) -> tuple[FlowField, FlowField]:
    """Exact direct/inverse flow fields for a synthetic scene transform."""
    grid = _grid(h, w)
    fwd = transform.apply(grid) - grid
    if isinstance(transform, AffineTransform):
        back = transform.inverse().apply(grid) - grid
    else:
        back = transform.apply_inverse(grid) - grid
    f_dir = FlowField(fwd[..., 0].astype(np.float32), fwd[..., 1].astype(np.float32), "direct")
    f_inv = FlowField(back[..., 0].astype(np.float32), back[..., 1].astype(np.float32), "inverse")
    return f_dir, f_inv


def sample_flow(field: FlowField, pts: np.ndarray) -> np.ndarray:
    """Bilinearly sample a flow field at fractional (x, y) points.

    Uses unclamped interpolation weights (linear extrapolation at borders),
    which keeps affine fields exact everywhere.
    """
    h, w = field.shape
    uv = field.uv().astype(np.float64)
    x = np.asarray(pts, dtype=np.float64)[..., 0]
    y = np.asarray(pts, dtype=np.float64)[..., 1]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    top = uv[y0, x0] * (1 - wx)[..., None] + uv[y0, x1] * wx[..., None]
    bot = uv[y1, x0] * (1 - wx)[..., None] + uv[y1, x1] * wx[..., None]
    return top * (1 - wy)[..., None] + bot * wy[..., None]


def invert_flow(field: FlowField, iters: int = 10) -> FlowField:
    """Numerically invert a flow field by fixed-point iteration (~1e-3 px)."""
    h, w = field.shape
    grid = _grid(h, w)
    inv = np.zeros_like(grid)
    for _ in range(iters):
        inv = -sample_flow(field, grid + inv)
    direction: Direction = "inverse" if field.direction == "direct" else "direct"
    return FlowField(inv[..., 0].astype(np.float32), inv[..., 1].astype(np.float32), direction)


def add_flow_noise(field: FlowField, sigma: float, rng: np.random.Generator) -> FlowField:
    """Corrupt a field with iid Gaussian noise (flow-quality ablation knob)."""
    return FlowField(
        field.u + rng.normal(0.0, sigma, size=field.u.shape).astype(np.float32),
        field.v + rng.normal(0.0, sigma, size=field.v.shape).astype(np.float32),
        field.direction,
    )


# ---------------------------------------------------------------------------
# .flo container
# ---------------------------------------------------------------------------


def write_flo(path, field: FlowField) -> None:
    h, w = field.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        interleaved = np.empty((h, w, 2), dtype="<f4")
        interleaved[..., 0] = field.u
        interleaved[..., 1] = field.v
        fh.write(interleaved.tobytes())


def read_flo(path, direction: Direction = "direct") -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic = struct.unpack_from("<f", raw, 0)[0]
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo dimensions {w}x{h}")
    expected = 12 + 8 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated .flo payload ({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype="<f4", count=h * w * 2, offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].copy(), data[..., 1].copy(), direction)


# ---------------------------------------------------------------------------
# multi-scale representation
# ---------------------------------------------------------------------------


def pool_to_stride(field: FlowField, stride: int) -> np.ndarray:
    """Average-pool to the level grid; displacements rescaled to level pixels.

    Returns [H/stride, W/stride, 2]; H and W must be stride-divisible.
    """
    h, w = field.shape
    if h % stride or w % stride:
        raise ShapeError(f"flow size {h}x{w} not divisible by stride {stride}")
    uv = field.uv()
    pooled = uv.reshape(h // stride, stride, w // stride, stride, 2).mean(axis=(1, 3), dtype=np.float64)
    return (pooled / stride).astype(np.float32)


class FlowEmbed(Module):
    """Learned per-level embedding of stride-rescaled flow into C channels."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, strides=(8, 16, 32), hidden: int = 16):
        self.strides = tuple(strides)
        self.conv1 = Conv2d(2, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, embed_dim, 3, rng)

    def __call__(self, field: FlowField) -> list[T.Tensor]:
        levels = []
        for stride in self.strides:
            pooled = pool_to_stride(field, stride)  # [Hl, Wl, 2]
            x = T.Tensor(np.ascontiguousarray(pooled.transpose(2, 0, 1)))
            levels.append(self.conv2(T.relu(self.conv1(x))))
        return levels
