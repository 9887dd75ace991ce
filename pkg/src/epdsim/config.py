"""Run configuration: a versioned TOML document with strict validation.

Sections: [model] (preset name or inline architecture numbers),
[hardware], [cluster] (disaggregation method or "auto"), [slo],
[scheduler], [output]. Unknown sections or keys are rejected so typos fail
loudly before any simulation starts.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cluster import ClusterSpec, DisaggregationMethod
from .engine import (
    DEFAULT_IMAGE_CEILING,
    DEFAULT_TOKEN_CEILING,
    POLICIES,
    STAGE_LEVEL,
)
from .migration import ROUND_ROBIN, TARGET_POLICIES
from .model_cost import HardwareProfile, ModelProfile
from .presets import DEFAULT_HARDWARE, MODEL_PRESETS, lookup_slo
from .workload import SloSpec

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration content."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelProfile
    model_name: str
    hardware: HardwareProfile
    method: Optional[DisaggregationMethod]  # None means "auto"
    n_instances: int
    slo: SloSpec
    policy: str = STAGE_LEVEL
    alpha: float = 0.5
    vision_cap_share: float = 0.5
    token_budget_ceiling: int = DEFAULT_TOKEN_CEILING
    image_budget_ceiling: int = DEFAULT_IMAGE_CEILING
    image_pool_fraction: float = 0.1
    preprocess_delay_s: float = 0.0
    migration_policy: str = ROUND_ROBIN
    migration_seed: int = 0
    report_json: str = "report.json"
    per_request_csv: Optional[str] = None

    def cluster_spec(self, method: Optional[DisaggregationMethod] = None
                     ) -> ClusterSpec:
        method = method or self.method
        if method is None:
            raise ConfigError("cluster method is 'auto'; run the profiler "
                              "or pass an explicit method")
        return ClusterSpec(
            method=method, policy=self.policy, alpha=self.alpha,
            vision_cap_share=self.vision_cap_share,
            token_budget_ceiling=self.token_budget_ceiling,
            image_budget_ceiling=self.image_budget_ceiling,
            image_pool_fraction=self.image_pool_fraction,
            preprocess_delay=self.preprocess_delay_s,
            migration_policy=self.migration_policy,
            migration_seed=self.migration_seed,
        )

    def to_dict(self) -> Dict:
        return {
            "config_version": CONFIG_VERSION,
            "model": {"preset": self.model_name,
                      **dataclasses.asdict(self.model)},
            "hardware": dataclasses.asdict(self.hardware),
            "cluster": {"method": self.method.label if self.method else "auto",
                        "n_instances": self.n_instances},
            "slo": {"ttft_s": self.slo.ttft_max, "tbt_s": self.slo.tbt_max},
            "scheduler": {
                "policy": self.policy, "alpha": self.alpha,
                "vision_cap_share": self.vision_cap_share,
                "token_budget_ceiling": self.token_budget_ceiling,
                "image_budget_ceiling": self.image_budget_ceiling,
                "image_pool_fraction": self.image_pool_fraction,
                "preprocess_delay_s": self.preprocess_delay_s,
                "migration_policy": self.migration_policy,
                "migration_seed": self.migration_seed,
            },
            "output": {"report_json": self.report_json,
                       "per_request_csv": self.per_request_csv},
        }


def _take(section: Dict, name: str, allowed: Dict) -> Dict:
    """Validate a section's keys against allowed names with defaults."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: "
                          f"{', '.join(sorted(unknown))}")
    merged = dict(allowed)
    merged.update(section)
    return merged


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelProfile)}
_HW_FIELDS = {f.name for f in dataclasses.fields(HardwareProfile)}


def _parse_model(section: Dict) -> tuple:
    preset = section.get("preset")
    if preset is not None:
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; choose "
                              f"from {sorted(MODEL_PRESETS)}")
        base = MODEL_PRESETS[preset]
        overrides = {k: v for k, v in section.items() if k != "preset"}
        unknown = set(overrides) - _MODEL_FIELDS
        if unknown:
            raise ConfigError(f"unknown key(s) in [model]: "
                              f"{', '.join(sorted(unknown))}")
        return dataclasses.replace(base, **overrides), preset
    unknown = set(section) - _MODEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown key(s) in [model]: "
                          f"{', '.join(sorted(unknown))}")
    try:
        return ModelProfile(**section), "custom"
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [model]: {exc}") from exc


def _parse_hardware(section: Dict) -> HardwareProfile:
    unknown = set(section) - _HW_FIELDS
    if unknown:
        raise ConfigError(f"unknown key(s) in [hardware]: "
                          f"{', '.join(sorted(unknown))}")
    merged = dataclasses.asdict(DEFAULT_HARDWARE)
    merged.update(section)
    try:
        return HardwareProfile(**merged)
    except ValueError as exc:
        raise ConfigError(f"invalid [hardware]: {exc}") from exc


def parse_config(data: Dict) -> RunConfig:
    known_sections = {"config_version", "model", "hardware", "cluster",
                      "slo", "scheduler", "output"}
    unknown = set(data) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    version = data.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, "
                          f"got {version!r}")
    model, model_name = _parse_model(dict(data.get("model", {})))
    hardware = _parse_hardware(dict(data.get("hardware", {})))

    cluster = _take(dict(data.get("cluster", {})), "cluster",
                    {"method": "auto", "n_instances": 0})
    method_text = cluster["method"]
    if method_text == "auto":
        method = None
        n_instances = int(cluster["n_instances"])
        if n_instances < 3:
            raise ConfigError("method 'auto' needs n_instances >= 3")
    else:
        try:
            method = DisaggregationMethod.parse(method_text)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        n_instances = method.total_instances
        if cluster["n_instances"] and cluster["n_instances"] != n_instances:
            raise ConfigError("n_instances disagrees with the method")

    slo_sec = _take(dict(data.get("slo", {})), "slo",
                    {"ttft_s": None, "tbt_s": None, "dataset": None})
    if slo_sec["dataset"] is not None:
        if slo_sec["ttft_s"] is not None or slo_sec["tbt_s"] is not None:
            raise ConfigError("[slo] takes either dataset or explicit bounds")
        try:
            ttft, tbt = lookup_slo(model_name, slo_sec["dataset"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    elif slo_sec["ttft_s"] is not None and slo_sec["tbt_s"] is not None:
        ttft, tbt = float(slo_sec["ttft_s"]), float(slo_sec["tbt_s"])
    else:
        raise ConfigError("[slo] needs ttft_s and tbt_s (or a dataset)")
    try:
        slo = SloSpec(ttft, tbt)
    except ValueError as exc:
        raise ConfigError(f"invalid [slo]: {exc}") from exc

    sched = _take(dict(data.get("scheduler", {})), "scheduler", {
        "policy": STAGE_LEVEL, "alpha": 0.5, "vision_cap_share": 0.5,
        "token_budget_ceiling": DEFAULT_TOKEN_CEILING,
        "image_budget_ceiling": DEFAULT_IMAGE_CEILING,
        "image_pool_fraction": 0.1, "preprocess_delay_s": 0.0,
        "migration_policy": ROUND_ROBIN, "migration_seed": 0,
    })
    if sched["policy"] not in POLICIES:
        raise ConfigError(f"unknown scheduler policy {sched['policy']!r}")
    if sched["migration_policy"] not in TARGET_POLICIES:
        raise ConfigError(
            f"unknown migration policy {sched['migration_policy']!r}")
    if not 0.0 < sched["alpha"] <= 1.0:
        raise ConfigError("alpha must be in (0, 1]")
    if not 0.0 < sched["vision_cap_share"] < 1.0:
        raise ConfigError("vision_cap_share must be in (0, 1)")
    if not 0.0 < sched["image_pool_fraction"] < 1.0:
        raise ConfigError("image_pool_fraction must be in (0, 1)")
    if sched["preprocess_delay_s"] < 0:
        raise ConfigError("preprocess_delay_s must be >= 0")

    out = _take(dict(data.get("output", {})), "output",
                {"report_json": "report.json", "per_request_csv": None})

    return RunConfig(
        model=model, model_name=model_name, hardware=hardware,
        method=method, n_instances=n_instances, slo=slo,
        policy=sched["policy"], alpha=float(sched["alpha"]),
        vision_cap_share=float(sched["vision_cap_share"]),
        token_budget_ceiling=int(sched["token_budget_ceiling"]),
        image_budget_ceiling=int(sched["image_budget_ceiling"]),
        image_pool_fraction=float(sched["image_pool_fraction"]),
        preprocess_delay_s=float(sched["preprocess_delay_s"]),
        migration_policy=sched["migration_policy"],
        migration_seed=int(sched["migration_seed"]),
        report_json=out["report_json"],
        per_request_csv=out["per_request_csv"],
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)
