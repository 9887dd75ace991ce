"""Analytical cost model for multimodal transformer inference.

FLOP and memory-access counts for the dominant operations (QKVO projection,
FFN, fused attention) in the vision and language towers, closed into
latencies with a roofline model. All counts are per layer; batch-level
helpers multiply by layer count and convert element counts to bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

KV_BLOCK_TOKENS = 16
IMAGE_BLOCK_TOKENS = 576


class StageKind(enum.Enum):
    ENCODE = "encode"
    PREFILL = "prefill"
    DECODE = "decode"


class OpKind(enum.Enum):
    QKVO_PROJ = "qkvo_proj"
    FFN = "ffn"
    ATTENTION = "attention"


@dataclass(frozen=True)
class ModelProfile:
    """Architecture constants for one model (language tower + vision tower)."""

    lang_hidden: int
    lang_heads: int
    lang_layers: int
    vision_hidden: int
    vision_heads: int
    vision_layers: int
    kv_head_ratio: float = 1.0
    dtype_bytes: int = 2
    ffn_ratio: int = 4

    def __post_init__(self):
        for name in ("lang_hidden", "lang_heads", "lang_layers",
                     "vision_hidden", "vision_heads", "vision_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lang_hidden % self.lang_heads != 0:
            raise ValueError("lang_hidden must be divisible by lang_heads")
        if self.vision_hidden % self.vision_heads != 0:
            raise ValueError("vision_hidden must be divisible by vision_heads")
        if not 0.0 < self.kv_head_ratio <= 1.0:
            raise ValueError("kv_head_ratio must be in (0, 1]")
        if self.dtype_bytes not in (1, 2, 4):
            raise ValueError("dtype_bytes must be one of 1, 2, 4")

    @property
    def kv_bytes_per_token(self) -> float:
        """Bytes of attention cache written per language token."""
        return (2 * self.lang_hidden * self.lang_layers
                * self.kv_head_ratio * self.dtype_bytes)


@dataclass(frozen=True)
class HardwareProfile:
    """Machine constants for one accelerator."""

    peak_flops: float
    mem_bandwidth: float
    gpu_memory_bytes: float
    model_weight_bytes: float
    interconnect_bandwidth: float
    migration_fixed_overhead: float = 5e-4
    batch_fixed_overhead: float = 1e-4

    def __post_init__(self):
        for name in ("peak_flops", "mem_bandwidth", "gpu_memory_bytes",
                     "model_weight_bytes", "interconnect_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.migration_fixed_overhead < 0 or self.batch_fixed_overhead < 0:
            raise ValueError("fixed overheads must be >= 0")
        if self.gpu_memory_bytes <= self.model_weight_bytes:
            raise ValueError("gpu_memory_bytes must exceed model_weight_bytes")


@dataclass(frozen=True)
class WorkVector:
    """Aggregate compute and memory demand of a batch."""

    flops: float = 0.0
    bytes: float = 0.0

    def __post_init__(self):
        if self.flops < 0 or self.bytes < 0:
            raise ValueError("WorkVector fields must be >= 0")

    def __add__(self, other: "WorkVector") -> "WorkVector":
        return WorkVector(self.flops + other.flops, self.bytes + other.bytes)


def op_flops(op: OpKind, stage: StageKind, B: int, tokens: int = 0,
             H: int = 0) -> int:
    """FLOP count of one operation for one layer.

    ``tokens`` is the per-image token count for encode and the sequence
    length for prefill/decode; the decode projection and FFN rows are
    independent of it. The decode QKVO row uses ``8BH^2`` (matching the
    prefill row pattern and the FFN decode row ``16BH^2``).
    """
    if op is OpKind.QKVO_PROJ:
        if stage is StageKind.DECODE:
            return 8 * B * H * H
        return 8 * B * tokens * H * H
    if op is OpKind.FFN:
        if stage is StageKind.DECODE:
            return 16 * B * H * H
        return 16 * B * tokens * H * H
    if op is OpKind.ATTENTION:
        if stage is StageKind.DECODE:
            return 4 * B * tokens * H
        return 4 * B * tokens * tokens * H
    raise ValueError(f"unknown op {op}")


def op_mem_elems(op: OpKind, stage: StageKind, B: int, tokens: int = 0,
                 H: int = 0, M: int = 0) -> int:
    """Memory-access element count of one operation for one layer.

    The weight-read constants (``4H^2`` for the projections, ``8H^2`` for
    the FFN) are included unconditionally; batch-level aggregation counts
    them once per batch.
    """
    if op is OpKind.QKVO_PROJ:
        if stage is StageKind.DECODE:
            return 8 * B * H + 4 * H * H
        return 8 * B * tokens * H + 4 * H * H
    if op is OpKind.FFN:
        if stage is StageKind.DECODE:
            return 10 * B * H + 8 * H * H
        return 10 * B * tokens * H + 8 * H * H
    if op is OpKind.ATTENTION:
        if stage is StageKind.DECODE:
            return 4 * B * tokens * M + 2 * B * H * (tokens + 1)
        return 4 * B * tokens * H + 2 * B * tokens * tokens * M
    raise ValueError(f"unknown op {op}")


def vision_work(image_tokens: Sequence[int], model: ModelProfile) -> WorkVector:
    """Work of encoding a batch of images, one entry per image token count.

    Linear and quadratic terms accumulate per image; the weight-read
    constants are counted once per batch per layer.
    """
    if not image_tokens:
        return WorkVector(0, 0)
    H, M = model.vision_hidden, model.vision_heads
    flops = 0
    elems = 12 * H * H  # QKVO + FFN weight reads, once per batch
    for t in image_tokens:
        flops += (op_flops(OpKind.QKVO_PROJ, StageKind.ENCODE, 1, t, H)
                  + op_flops(OpKind.FFN, StageKind.ENCODE, 1, t, H)
                  + op_flops(OpKind.ATTENTION, StageKind.ENCODE, 1, t, H))
        elems += 22 * t * H + 2 * t * t * M
    layers = model.vision_layers
    return WorkVector(flops * layers, elems * layers * model.dtype_bytes)


def language_work(prefill_chunks: Sequence[int],
                  decode_contexts: Sequence[int],
                  model: ModelProfile) -> WorkVector:
    """Work of one language-tower batch.

    ``prefill_chunks`` holds per-request chunk token counts; each decode
    entry contributes one token and reads its own cached context. Cache
    reads and writes scale with ``kv_head_ratio``.
    """
    if not prefill_chunks and not decode_contexts:
        return WorkVector(0, 0)
    H, M = model.lang_hidden, model.lang_heads
    ratio = model.kv_head_ratio
    flops = 0
    elems = 12.0 * H * H
    for s in prefill_chunks:
        flops += (op_flops(OpKind.QKVO_PROJ, StageKind.PREFILL, 1, s, H)
                  + op_flops(OpKind.FFN, StageKind.PREFILL, 1, s, H)
                  + op_flops(OpKind.ATTENTION, StageKind.PREFILL, 1, s, H))
        elems += 22 * s * H + 2 * s * s * M
    for s in decode_contexts:
        flops += (op_flops(OpKind.QKVO_PROJ, StageKind.DECODE, 1, 0, H)
                  + op_flops(OpKind.FFN, StageKind.DECODE, 1, 0, H)
                  + op_flops(OpKind.ATTENTION, StageKind.DECODE, 1, s, H))
        elems += 18 * H + 4 * s * M + 2 * H * (s + 1) * ratio
    layers = model.lang_layers
    return WorkVector(flops * layers, elems * layers * model.dtype_bytes)


def batch_work(encode_images: int, encode_T: int,
               prefill_tokens_by_request: Sequence[int],
               decode_entries: Sequence[int],
               model: ModelProfile) -> Tuple[WorkVector, WorkVector]:
    """Split a batch composition into (vision, language) work vectors."""
    vision = vision_work([encode_T] * encode_images, model)
    language = language_work(prefill_tokens_by_request, decode_entries, model)
    return vision, language


def arithmetic_intensity(w: WorkVector) -> float:
    """FLOPs per byte of memory traffic."""
    if w.bytes <= 0:
        raise ValueError("arithmetic intensity undefined for zero memory traffic")
    return w.flops / w.bytes


def roofline_latency(w: WorkVector, hw: HardwareProfile) -> float:
    """Batch latency under the roofline bound plus a fixed per-batch overhead."""
    return max(w.flops / hw.peak_flops,
               w.bytes / hw.mem_bandwidth) + hw.batch_fixed_overhead


def dual_stream_latency(vision: WorkVector, language: WorkVector,
                        hw: HardwareProfile) -> float:
    """Latency when vision and language batches share the device.

    The two streams pool compute and bandwidth demand, so the result is at
    least the slower stream alone and at most their sequential sum.
    """
    return roofline_latency(vision + language, hw)


def kv_cache_bytes(tokens: int, model: ModelProfile) -> float:
    """Exact attention-cache footprint of ``tokens`` cached tokens."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    return tokens * model.kv_bytes_per_token


def image_cache_bytes(visual_tokens: int, model: ModelProfile) -> int:
    """Exact footprint of projected image embeddings (at language hidden size)."""
    if visual_tokens < 0:
        raise ValueError("visual_tokens must be >= 0")
    return visual_tokens * model.lang_hidden * model.dtype_bytes


def kv_blocks_needed(tokens: int) -> int:
    """Paged allocation size: 16-token blocks, rounded up."""
    return -(-tokens // KV_BLOCK_TOKENS) if tokens > 0 else 0


def image_blocks_needed(visual_tokens: int) -> int:
    """Paged allocation size: 576-token blocks, rounded up."""
    return -(-visual_tokens // IMAGE_BLOCK_TOKENS) if visual_tokens > 0 else 0
