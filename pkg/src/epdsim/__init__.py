"""Discrete-event simulator for disaggregated multimodal LLM serving.

The package models a cluster of typed inference instances (encode, prefill,
decode, or co-located combinations) executing a request trace under an
analytical roofline cost model, with stage-level batching, paged cache
pools, pull-based cache migration, SLO metrics, a goodput search, and an
offline profiler that picks a disaggregation method for a workload.
"""

from .model_cost import (
    HardwareProfile,
    IMAGE_BLOCK_TOKENS,
    KV_BLOCK_TOKENS,
    ModelProfile,
    OpKind,
    StageKind,
    WorkVector,
    arithmetic_intensity,
    batch_work,
    dual_stream_latency,
    image_blocks_needed,
    image_cache_bytes,
    kv_blocks_needed,
    kv_cache_bytes,
    language_work,
    op_flops,
    op_mem_elems,
    roofline_latency,
    vision_work,
)
from .presets import DEFAULT_HARDWARE, MODEL_PRESETS, SLO_TABLE, lookup_slo
from .workload import (
    RequestSpec,
    SloSpec,
    StagePlan,
    Trace,
    TraceError,
    convert_csv_trace,
    load_trace,
    plan_stages,
    save_trace,
    scale_to_rate,
    synth_trace,
    trace_rate,
)
from .engine import (
    ALL_INSTANCE_TYPES,
    Batch,
    BudgetPair,
    CachePool,
    InstanceState,
    InstanceType,
    PREFILL_PRIORITIZED,
    STAGE_LEVEL,
    STALL_FREE_CHUNKED,
    batch_latency,
    derive_latency_cap,
    search_budgets,
)
from .migration import (
    LEAST_LOAD,
    MigrationJob,
    MigrationPhase,
    RANDOM,
    ROUND_ROBIN,
    TargetSelector,
)
from .cluster import (
    Cluster,
    ClusterConfigError,
    ClusterSpec,
    DisaggregationMethod,
    SimulationDeadlock,
    run_trace,
)
from .metrics import (
    GoodputInfeasible,
    GoodputResult,
    RequestMetrics,
    SimReport,
    build_report,
    find_goodput,
    meets_slo,
    request_metrics,
    slo_attainment,
)
from .profiler import (
    PartitionResult,
    ProfilerError,
    SelectionResult,
    WorkloadSummary,
    brute_force_select,
    candidate_methods,
    enumerate_methods,
    partition,
    plan_partition,
    search_space_size,
    select_method,
    stage_budgets,
    summarize_workload,
)
from .config import ConfigError, RunConfig, load_config, parse_config

__version__ = "0.1.0"
