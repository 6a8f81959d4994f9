"""Full segmentation model assembly, configuration, and checkpoint format.

Checkpoint layout (little-endian):
  magic   4 bytes  b"FVOS"
  version u32      currently 1
  config  u32 length + UTF-8 JSON of the ModelConfig
  params  u32 count, then per parameter:
            u16 name length + UTF-8 name
            u8 ndim + ndim x u32 dims
            float32 data, row-major
  opt     u8 flag; when 1: u32 step count, u32 entry count, then per entry
            the name (as above) followed by two float32 blobs (first and
            second moments), each ndim-prefixed like a parameter
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionConfig, DeformableAttention, QKFlowEnrich
from .decoder import PyramidDecoder
from .encoders import ImageEncoder, MaskEncoder
from .errors import FormatError
from .flow import FlowEmbed
from .memory import FusionBlock, LongTermReadout
from .nn import Adam, Module

MAGIC = b"FVOS"
VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 128
    heads: int = 4
    n_offsets: int = 4
    window_base: float = 4.0
    strides: tuple = (8, 16, 32)
    backbone_widths: tuple = (16, 32, 64, 128, 256)
    mask_hidden: tuple = (16, 32)
    flow_hidden: int = 16
    max_hw: tuple = (64, 96)
    decoder_groups: int = 8
    normalize_offsets: bool = True
    use_scale_embedding: bool = True
    memorize_every: int = 5
    memory_capacity: int = 16
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(self.strides)
        self.backbone_widths = tuple(self.backbone_widths)
        self.mask_hidden = tuple(self.mask_hidden)
        self.max_hw = tuple(self.max_hw)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            embed_dim=self.embed_dim, heads=self.heads, n_offsets=self.n_offsets,
            window_base=self.window_base, strides=self.strides,
            normalize_offsets=self.normalize_offsets,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(blob: str) -> "ModelConfig":
        return ModelConfig(**json.loads(blob))


class SegmentationModel(Module):
    """Encoders, matching blocks, memory readout, fusion, and decoder."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        acfg = config.attention()
        self.image_encoder = ImageEncoder(
            config.embed_dim, rng, widths=config.backbone_widths, max_hw=config.max_hw
        )
        if not config.use_scale_embedding:
            for t in self.image_encoder.scale_embed:
                t.data[:] = 0.0
                t.requires_grad = False
        self.mask_encoder = MaskEncoder(config.embed_dim, rng, hidden=config.mask_hidden)
        self.self_attn = DeformableAttention(acfg, rng, with_flow=False, with_mask=False)
        self.qk_enrich = QKFlowEnrich(config.embed_dim, rng)
        self.cross_attn = DeformableAttention(acfg, rng, with_flow=True, with_mask=True)
        self.long_term = LongTermReadout(config.embed_dim, config.heads, rng)
        self.fusion = FusionBlock(config.embed_dim, rng)
        self.decoder = PyramidDecoder(config.embed_dim, rng, groups=config.decoder_groups)
        self.flow_embed = FlowEmbed(config.embed_dim, rng, strides=config.strides, hidden=config.flow_hidden)
        self._identity_init()

    def _identity_init(self) -> None:
        # start the mask-to-logits transport chain as an identity map so the
        # tied channel bank decodes labels from step one; training refines
        eye = np.eye(self.config.embed_dim, dtype=np.float32)
        self.cross_attn.mask_proj.weight.data = eye.copy()
        self.cross_attn.v_proj.weight.data = eye.copy()
        self.cross_attn.out_proj.weight.data = eye.copy()
        self.long_term.mask_lift.weight.data = eye.copy()
        self.long_term.v_proj.weight.data = eye.copy()
        self.long_term.out_proj.weight.data = eye.copy()
        self.fusion.proj.weight.data = 0.5 * np.concatenate([eye, eye], axis=0)

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def astype(self, dtype) -> "SegmentationModel":
        for p in self.params().values():
            p.data = p.data.astype(dtype)
        return self


def _write_blob(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_blob(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _need(fh.read(1), 1))
    dims = [struct.unpack("<I", _need(fh.read(4), 4))[0] for _ in range(ndim)]
    count = int(np.prod(dims)) if dims else 1
    raw = _need(fh.read(4 * count), 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def _need(raw: bytes, n: int) -> bytes:
    if len(raw) != n:
        raise FormatError("truncated checkpoint")
    return raw


def _write_name(fh, name: str) -> None:
    enc = name.encode()
    fh.write(struct.pack("<H", len(enc)))
    fh.write(enc)


def _read_name(fh) -> str:
    (n,) = struct.unpack("<H", _need(fh.read(2), 2))
    return _need(fh.read(n), n).decode()


def save_checkpoint(path, model: SegmentationModel, optimizer: Adam | None = None) -> None:
    params = model.params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = model.config.to_json().encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_name(fh, name)
            _write_blob(fh, params[name].data)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", optimizer.step_count))
            fh.write(struct.pack("<I", len(optimizer.m)))
            for name in sorted(optimizer.m):
                _write_name(fh, name)
                _write_blob(fh, optimizer.m[name])
                _write_blob(fh, optimizer.v[name])


def load_checkpoint(path) -> tuple[SegmentationModel, dict | None]:
    """Rebuild the model (and optional optimizer state) from a checkpoint."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _need(fh.read(4), 4))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _need(fh.read(4), 4))
        config = ModelConfig.from_json(_need(fh.read(clen), clen).decode())
        model = SegmentationModel(config)
        params = model.params()
        (count,) = struct.unpack("<I", _need(fh.read(4), 4))
        seen = set()
        for _ in range(count):
            name = _read_name(fh)
            data = _read_blob(fh)
            if name not in params:
                raise FormatError(f"{path}: unknown parameter '{name}'")
            if tuple(data.shape) != tuple(params[name].shape):
                raise FormatError(
                    f"{path}: parameter '{name}' has shape {data.shape}, expected {params[name].shape}"
                )
            params[name].data = data
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise FormatError(f"{path}: missing parameters {sorted(missing)[:3]}...")
        (flag,) = struct.unpack("<B", _need(fh.read(1), 1))
        opt_state = None
        if flag:
            (step,) = struct.unpack("<I", _need(fh.read(4), 4))
            (n,) = struct.unpack("<I", _need(fh.read(4), 4))
            m, v = {}, {}
            for _ in range(n):
                name = _read_name(fh)
                m[name] = _read_blob(fh)
                v[name] = _read_blob(fh)
            opt_state = {"step": step, "m": m, "v": v}
    return model, opt_state
