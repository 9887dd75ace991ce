"""Offline disaggregation profiler.

From a historical trace it summarizes per-stage work, searches per-stage
batch budgets under the SLO, estimates stage throughputs and execution
times, partitions the cluster proportionally, and picks the best of three
candidate disaggregation methods by replayed goodput. A brute-force oracle
over the full partition space is included for comparison.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterSpec, DisaggregationMethod, run_trace
from .engine import (
    DEFAULT_IMAGE_CEILING,
    DEFAULT_TOKEN_CEILING,
    InstanceType,
    STAGE_LEVEL,
    search_budgets,
)
from .metrics import GOODPUT_ATTAINMENT, GoodputInfeasible, find_goodput
from .model_cost import (
    HardwareProfile,
    IMAGE_BLOCK_TOKENS,
    ModelProfile,
    language_work,
    roofline_latency,
    vision_work,
)
from .workload import SloSpec, Trace, scale_to_rate

ALPHA = 0.5
BETA = 0.5
GAMMA = 0.9


class ProfilerError(ValueError):
    """Raised when the profiler cannot produce a feasible plan."""


@dataclass(frozen=True)
class WorkloadSummary:
    """Per-stage token totals of a trace window."""

    W_e: int  # visual tokens to encode
    W_p: int  # prompt plus visual tokens to prefill
    W_d: int  # output tokens to decode
    N_r: int  # requests
    n_images: int = 0

    @property
    def avg_image_tokens(self) -> float:
        if self.n_images == 0:
            return float(IMAGE_BLOCK_TOKENS)
        return self.W_e / self.n_images

    @property
    def avg_context_tokens(self) -> float:
        """Mean per-request token footprint during decode."""
        return (self.W_p + self.W_d) / self.N_r


def summarize_workload(trace: Trace) -> WorkloadSummary:
    if len(trace) == 0:
        raise ProfilerError("cannot summarize an empty trace")
    W_e = sum(r.visual_tokens for r in trace.requests)
    W_p = sum(r.visual_tokens + r.prompt_tokens for r in trace.requests)
    W_d = sum(r.output_tokens for r in trace.requests)
    n_images = sum(len(r.image_token_counts) for r in trace.requests)
    return WorkloadSummary(W_e, W_p, W_d, len(trace), n_images)


def decode_concurrency_cap(summary: WorkloadSummary, model: ModelProfile,
                           hw: HardwareProfile,
                           gamma: float = GAMMA) -> int:
    """How many requests' caches fit in a gamma share of free memory."""
    free = hw.gpu_memory_bytes - hw.model_weight_bytes
    per_request = model.kv_bytes_per_token * summary.avg_context_tokens
    return int(gamma * free / per_request)


def stage_budgets(slo: SloSpec, model: ModelProfile, hw: HardwareProfile,
                  summary: WorkloadSummary,
                  alpha: float = ALPHA, beta: float = BETA,
                  gamma: float = GAMMA,
                  ceilings: Tuple[int, int] = (DEFAULT_TOKEN_CEILING,
                                               DEFAULT_IMAGE_CEILING)
                  ) -> Tuple[int, int, int]:
    """(tau_e images, tau_p tokens, tau_d tokens) per-stage batch budgets.

    Encode and prefill budgets are latency-capped at alpha/beta shares of
    the TTFT bound; the decode budget is capped by the TBT bound and then
    by how many concurrent requests' caches fit in a gamma share of free
    memory.
    """
    probe = max(1, round(summary.avg_image_tokens))
    tau_e = search_budgets(alpha * slo.ttft_max, model, hw, ceilings,
                           has_language=False, has_encode=True,
                           probe_image_tokens=probe).image_budget
    tau_p = search_budgets(beta * slo.ttft_max, model, hw, ceilings,
                           has_language=True, has_encode=False).token_budget
    tau_d = search_budgets(slo.tbt_max, model, hw, ceilings,
                           has_language=True, has_encode=False).token_budget
    mem_cap = decode_concurrency_cap(summary, model, hw, gamma)
    if mem_cap < 1:
        raise ProfilerError(
            f"decode memory infeasible: concurrency cap {mem_cap} < 1")
    return tau_e, tau_p, min(tau_d, mem_cap)


def estimate_throughputs(budgets: Tuple[int, int, int], model: ModelProfile,
                         hw: HardwareProfile, summary: WorkloadSummary
                         ) -> Tuple[float, float, float]:
    """Tokens/second each stage sustains at its full batch budget."""
    tau_e, tau_p, tau_d = budgets
    T = max(1, round(summary.avg_image_tokens))
    ctx = max(1, round(summary.avg_context_tokens))
    tp_e = (tau_e * T / roofline_latency(vision_work([T] * tau_e, model), hw)
            if tau_e > 0 else 0.0)
    tp_p = tau_p / roofline_latency(language_work([tau_p], [], model), hw)
    tp_d = tau_d / roofline_latency(language_work([], [ctx] * tau_d, model), hw)
    return tp_e, tp_p, tp_d


@dataclass(frozen=True)
class PartitionResult:
    N_e: int
    N_p: int
    N_d: int
    t_e: float
    t_p: float
    t_d: float
    tp_e: float
    tp_p: float
    tp_d: float


def partition(N: int, t_e: float, t_p: float, t_d: float
              ) -> Tuple[int, int, int]:
    """Split N instances proportionally to stage times (largest-remainder
    rounding), guaranteeing at least one instance per stage."""
    if N < 3:
        raise ProfilerError(f"cannot give each stage an instance with N={N}")
    times = [t_e, t_p, t_d]
    if any(t < 0 for t in times) or sum(times) <= 0:
        raise ProfilerError("stage times must be >= 0 with a positive sum")
    total = sum(times)
    exact = [N * t / total for t in times]
    counts = [int(math.floor(x)) for x in exact]
    remainders = [x - c for x, c in zip(exact, counts)]
    while sum(counts) < N:
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    while min(counts) < 1:
        lo = counts.index(min(counts))
        hi = max(range(3), key=lambda j: (counts[j], -j))
        counts[lo] += 1
        counts[hi] -= 1
    return counts[0], counts[1], counts[2]


def plan_partition(trace: Trace, N: int, slo: SloSpec, model: ModelProfile,
                   hw: HardwareProfile) -> PartitionResult:
    """Run the summarize / budget / throughput / partition pipeline."""
    summary = summarize_workload(trace)
    budgets = stage_budgets(slo, model, hw, summary)
    tp_e, tp_p, tp_d = estimate_throughputs(budgets, model, hw, summary)
    t_e = summary.W_e / tp_e if tp_e > 0 else 0.0
    t_p = summary.W_p / tp_p
    t_d = summary.W_d / tp_d
    N_e, N_p, N_d = partition(N, t_e, t_p, t_d)
    return PartitionResult(N_e, N_p, N_d, t_e, t_p, t_d, tp_e, tp_p, tp_d)


def candidate_methods(N_e: int, N_p: int, N_d: int
                      ) -> Tuple[DisaggregationMethod, ...]:
    """The three disaggregation families instantiated from one partition."""
    return (
        DisaggregationMethod.from_dict({InstanceType("E"): N_e,
                                        InstanceType("P"): N_p,
                                        InstanceType("D"): N_d}),
        DisaggregationMethod.from_dict({InstanceType("EP"): N_e + N_p,
                                        InstanceType("D"): N_d}),
        DisaggregationMethod.from_dict({InstanceType("ED"): N_e + N_d,
                                        InstanceType("P"): N_p}),
    )


def search_space_size(N: int) -> int:
    """Number of distinct deployments across the three families."""
    if N < 2:
        raise ProfilerError("search space defined for N >= 2")
    return 2 * (N - 1) + (N - 1) * (N - 2) // 2


def enumerate_methods(N: int) -> List[DisaggregationMethod]:
    """Every method in the full search space, in deterministic order."""
    out: List[DisaggregationMethod] = []
    for e in range(1, N - 1):
        for p in range(1, N - e):
            out.append(candidate_methods(e, p, N - e - p)[0])
    for d in range(1, N):
        out.append(DisaggregationMethod.from_dict(
            {InstanceType("EP"): N - d, InstanceType("D"): d}))
    for p in range(1, N):
        out.append(DisaggregationMethod.from_dict(
            {InstanceType("ED"): N - p, InstanceType("P"): p}))
    return out


def method_goodput(method: DisaggregationMethod, trace: Trace, slo: SloSpec,
                   model: ModelProfile, hw: HardwareProfile,
                   rate_bounds: Tuple[float, float] = (0.1, 16.0),
                   tolerance: float = 0.05,
                   spec_overrides: Optional[dict] = None) -> float:
    """Replayed goodput of one method; 0.0 when infeasible at the low rate.

    Requests are re-stamped with ``slo`` so the attainment test matches the
    bound being profiled for, even when the trace embeds per-request bounds.
    """
    spec = ClusterSpec(method=method, policy=STAGE_LEVEL,
                       **(spec_overrides or {}))
    trace = dataclasses.replace(trace, requests=tuple(
        dataclasses.replace(r, slo=slo) for r in trace.requests))

    def attainment_at(rate: float) -> float:
        scaled = scale_to_rate(trace, rate)
        return run_trace(spec, model, hw, slo, scaled).attainment

    try:
        return find_goodput(attainment_at, rate_bounds, tolerance).rate
    except GoodputInfeasible:
        return 0.0


@dataclass(frozen=True)
class SelectionResult:
    best: DisaggregationMethod
    table: Tuple[Tuple[DisaggregationMethod, float], ...]
    partition: Optional[PartitionResult] = None

    @property
    def best_goodput(self) -> float:
        return max(g for _, g in self.table)


def select_method(trace: Trace, N: int, slo: SloSpec, model: ModelProfile,
                  hw: HardwareProfile,
                  rate_bounds: Tuple[float, float] = (0.1, 16.0),
                  tolerance: float = 0.05,
                  spec_overrides: Optional[dict] = None) -> SelectionResult:
    """Heuristic selection: replay the three partition-derived candidates
    and return the goodput argmax (ties broken by candidate order)."""
    plan = plan_partition(trace, N, slo, model, hw)
    candidates = candidate_methods(plan.N_e, plan.N_p, plan.N_d)
    table = tuple(
        (m, method_goodput(m, trace, slo, model, hw, rate_bounds,
                           tolerance, spec_overrides))
        for m in candidates)
    if all(g == 0.0 for _, g in table):
        rows = "; ".join(f"{m.label}: goodput 0" for m, _ in table)
        raise ProfilerError(f"all candidate methods infeasible ({rows})")
    best = max(table, key=lambda row: row[1])
    first_best = next(row for row in table if row[1] == best[1])
    return SelectionResult(best=first_best[0], table=table, partition=plan)


def brute_force_select(trace: Trace, N: int, slo: SloSpec,
                       model: ModelProfile, hw: HardwareProfile,
                       rate_bounds: Tuple[float, float] = (0.1, 16.0),
                       tolerance: float = 0.05,
                       spec_overrides: Optional[dict] = None
                       ) -> SelectionResult:
    """Oracle selection over the full deployment space."""
    table = tuple(
        (m, method_goodput(m, trace, slo, model, hw, rate_bounds,
                           tolerance, spec_overrides))
        for m in enumerate_methods(N))
    best_g = max(g for _, g in table)
    best = next(m for m, g in table if g == best_g)
    return SelectionResult(best=best, table=table)
