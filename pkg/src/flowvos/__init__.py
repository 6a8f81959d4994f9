"""Flow-guided deformable attention for video object segmentation."""

from .attention import AttentionConfig, DeformableAttention, PyramidLayout, QKFlowEnrich
from .dataio import Sequence, gen_synthetic, load_sequence, save_sequence
from .decoder import PyramidDecoder, logits_to_mask
from .encoders import ImageEncoder, MaskEncoder, ObjectMask, shuffle_channels
from .estimator import VideoSegmenter
from .flow import AffineTransform, FlowField, read_flo, synth_flow, write_flo
from .memory import FusionBlock, LongTermReadout, MemoryBank, MemoryEntry
from .metrics import EvalReport, boundary_f, evaluate_sequence, region_j
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .pipeline import AblationFlags, PropagationTrace, bench, propagate, train_toy
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "AffineTransform", "AttentionConfig", "DeformableAttention",
    "EvalReport", "FlowField", "FusionBlock", "ImageEncoder", "LongTermReadout",
    "MaskEncoder", "MemoryBank", "MemoryEntry", "ModelConfig", "ObjectMask",
    "PropagationTrace", "PyramidDecoder", "PyramidLayout", "QKFlowEnrich",
    "SegmentationModel", "Sequence", "Tape", "Tensor", "VideoSegmenter",
    "backward", "bench", "boundary_f", "evaluate_sequence", "gen_synthetic",
    "load_checkpoint", "load_sequence", "logits_to_mask", "no_grad", "propagate",
    "read_flo", "region_j", "save_checkpoint", "save_sequence", "shuffle_channels",
    "synth_flow", "train_toy", "write_flo",
]
