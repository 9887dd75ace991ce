"""Named model presets, default hardware, and default SLO lookup table."""

from __future__ import annotations

from typing import Dict, Tuple

from .model_cost import HardwareProfile, ModelProfile

# 7B-class vision-language models: 4096-wide 32-layer language tower with a
# 24-layer ViT-L style vision tower. The presets differ upstream (how many
# visual tokens an image produces), which traces carry explicitly.
MODEL_PRESETS: Dict[str, ModelProfile] = {
    "llava-1.5-7b": ModelProfile(
        lang_hidden=4096, lang_heads=32, lang_layers=32,
        vision_hidden=1024, vision_heads=16, vision_layers=24,
    ),
    "llava-next-7b": ModelProfile(
        lang_hidden=4096, lang_heads=32, lang_layers=32,
        vision_hidden=1024, vision_heads=16, vision_layers=24,
    ),
    "qwen2-vl-7b": ModelProfile(
        lang_hidden=4096, lang_heads=32, lang_layers=32,
        vision_hidden=1024, vision_heads=16, vision_layers=24,
    ),
}

# H20-class accelerator: 141 GB memory, NVLink-class interconnect. Peak FLOP
# rate and bandwidth are configurable defaults, not measured values.
DEFAULT_HARDWARE = HardwareProfile(
    peak_flops=1.48e14,
    mem_bandwidth=4.0e12,
    gpu_memory_bytes=141e9,
    model_weight_bytes=14e9,
    interconnect_bandwidth=200e9,
    migration_fixed_overhead=5e-4,
    batch_fixed_overhead=1e-4,
)

# Default (TTFT seconds, TBT seconds) per (model preset, dataset).
SLO_TABLE: Dict[Tuple[str, str], Tuple[float, float]] = {
    ("llava-1.5-7b", "vizwiz"): (4.0, 0.08),
    ("llava-1.5-7b", "textvqa"): (4.0, 0.08),
    ("llava-1.5-7b", "mme"): (4.0, 0.08),
    ("llava-1.5-7b", "pope"): (4.0, 0.08),
    ("llava-1.5-7b", "textcaps"): (4.0, 0.08),
    ("llava-next-7b", "vizwiz"): (8.0, 0.60),
    ("llava-next-7b", "textvqa"): (8.0, 0.60),
    ("llava-next-7b", "mme"): (8.0, 0.60),
    ("llava-next-7b", "pope"): (8.0, 0.30),
    ("llava-next-7b", "textcaps"): (8.0, 0.30),
    ("qwen2-vl-7b", "vizwiz"): (8.0, 0.60),
    ("qwen2-vl-7b", "textvqa"): (8.0, 0.60),
    ("qwen2-vl-7b", "mme"): (8.0, 0.60),
    ("qwen2-vl-7b", "pope"): (8.0, 0.10),
    ("qwen2-vl-7b", "textcaps"): (8.0, 0.10),
}


def lookup_slo(model_preset: str, dataset: str) -> Tuple[float, float]:
    key = (model_preset, dataset)
    if key not in SLO_TABLE:
        raise KeyError(f"no default SLO for {model_preset!r} / {dataset!r}")
    return SLO_TABLE[key]
