"""Per-request and aggregate serving metrics, plus the goodput search.

A request meets its SLO when its TTFT is within bound and at least 90% of
its between-token gaps are within bound (thresholds inclusive); unfinished
requests count as misses. Goodput is the largest request rate at which SLO
attainment stays at or above 90%, found by bisection over rate-scaled
replays of a base trace.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .workload import SloSpec

SLO_TBT_FRACTION = 0.9
GOODPUT_ATTAINMENT = 0.9

# The eight additive components of a request's end-to-end latency, in
# lifecycle order. They partition (t_done - arrival) exactly.
BREAKDOWN_KEYS = (
    "encode_queue_s", "encode_exec_s", "ep_migration_s",
    "prefill_queue_s", "prefill_exec_s", "pd_migration_s",
    "decode_queue_s", "decode_exec_s",
)


class GoodputInfeasible(RuntimeError):
    """SLO attainment is below threshold even at the minimum rate."""


@dataclass(frozen=True)
class RequestMetrics:
    rid: str
    finished: bool
    arrival_s: float
    ttft_s: Optional[float]
    tbt_values: Tuple[float, ...]
    breakdown: Dict[str, float]
    slo: SloSpec

    @property
    def e2e_s(self) -> Optional[float]:
        if not self.finished:
            return None
        return sum(self.breakdown.values())


def meets_slo(m: RequestMetrics, slo: Optional[SloSpec] = None) -> bool:
    """SLO verdict: TTFT within bound and >= 90% of TBT gaps within bound
    (inclusive at both thresholds). Unfinished requests never meet it."""
    slo = slo or m.slo
    if not m.finished or m.ttft_s is None:
        return False
    if m.ttft_s > slo.ttft_max:
        return False
    if not m.tbt_values:
        return True
    ok = sum(1 for t in m.tbt_values if t <= slo.tbt_max)
    return ok / len(m.tbt_values) >= SLO_TBT_FRACTION


def request_metrics(state) -> RequestMetrics:
    """Derive metrics from a simulated request's timestamps and counters.

    Queueing components are residuals between stage boundaries after
    subtracting execution and migration time, so the eight components
    partition end-to-end latency by construction. Preprocessing delay lands
    in the first queueing component.
    """
    arrival = state.spec.arrival_time
    bd = {k: 0.0 for k in BREAKDOWN_KEYS}
    ttft = None
    tbt: Tuple[float, ...] = ()
    if state.finished:
        times = state.token_times
        ttft = state.t_first_token - arrival
        tbt = tuple(b - a for a, b in zip(times, times[1:]))
        bd["encode_exec_s"] = state.encode_exec
        bd["prefill_exec_s"] = state.prefill_exec
        bd["decode_exec_s"] = state.decode_exec
        bd["ep_migration_s"] = state.ep_migration_s
        bd["pd_migration_s"] = state.pd_migration_s
        if state.t_encode_done is not None:
            bd["encode_queue_s"] = (state.t_encode_done - arrival
                                    - state.encode_exec)
            prefill_start = state.t_encode_done
        else:
            prefill_start = arrival
        bd["prefill_queue_s"] = (state.t_first_token - prefill_start
                                 - state.prefill_exec - state.ep_migration_s)
        bd["decode_queue_s"] = (state.t_done - state.t_first_token
                                - state.decode_exec - state.pd_migration_s)
    return RequestMetrics(
        rid=state.rid, finished=state.finished, arrival_s=arrival,
        ttft_s=ttft, tbt_values=tbt, breakdown=bd, slo=state.spec.slo)


@dataclass
class SimReport:
    """One run's per-request metrics, config echo, and aggregates."""

    requests: List[RequestMetrics]
    meta: Dict
    aggregates: Dict
    migrations: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def attainment(self) -> float:
        return self.aggregates["slo_attainment"]

    def to_dict(self) -> Dict:
        return {"meta": self.meta, "aggregates": self.aggregates}

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: Union[str, Path]) -> None:
        cols = ["rid", "finished", "meets_slo", "arrival_s", "ttft_s",
                "e2e_s", "tbt_p95_s"] + list(BREAKDOWN_KEYS)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for m in self.requests:
                tbt_p95 = (float(np.percentile(m.tbt_values, 95))
                           if m.tbt_values else "")
                w.writerow([m.rid, m.finished, meets_slo(m), m.arrival_s,
                            m.ttft_s if m.ttft_s is not None else "",
                            m.e2e_s if m.e2e_s is not None else "",
                            tbt_p95]
                           + [m.breakdown[k] for k in BREAKDOWN_KEYS])


def slo_attainment(metrics: Sequence[RequestMetrics]) -> float:
    """Fraction of requests meeting their SLO; unfinished count as misses."""
    if not metrics:
        warnings.warn("SLO attainment of an empty report defined as 1.0")
        return 1.0
    return sum(1 for m in metrics if meets_slo(m)) / len(metrics)


def _percentiles(values: Sequence[float]) -> Dict[str, float]:
    if not values:
        return {}
    arr = np.asarray(values, dtype=float)
    return {f"p{p}": float(np.percentile(arr, p)) for p in (50, 90, 95, 99)}


def build_report(states, meta: Dict,
                 migrations: Sequence[Tuple[str, float]] = ()) -> SimReport:
    """Assemble a report from simulated request states."""
    metrics = [request_metrics(s) for s in states]
    finished = [m for m in metrics if m.finished]
    ttfts = [m.ttft_s for m in finished]
    tbts = [t for m in finished for t in m.tbt_values]
    done_times = [s.t_done for s in states if s.finished]
    arrivals = [m.arrival_s for m in metrics]
    span = (max(done_times) - min(arrivals)) if done_times else 0.0
    total_tokens = sum(s.tokens_out for s in states)
    total_e2e = sum(m.e2e_s for m in finished)
    total_migration = sum(m.breakdown["ep_migration_s"]
                          + m.breakdown["pd_migration_s"] for m in finished)
    mig_stats: Dict[str, Dict[str, float]] = {}
    for kind in ("ep", "pd"):
        durations = [d for k, d in migrations if k == kind]
        if durations:
            mig_stats[kind] = {
                "count": len(durations),
                "mean_s": float(np.mean(durations)),
                "p95_s": float(np.percentile(durations, 95)),
            }
    breakdown_means = {
        k: (float(np.mean([m.breakdown[k] for m in finished]))
            if finished else 0.0)
        for k in BREAKDOWN_KEYS
    }
    aggregates = {
        "n_requests": len(metrics),
        "n_finished": len(finished),
        "slo_attainment": slo_attainment(metrics),
        "throughput_rps": (len(finished) / span) if span > 0 else 0.0,
        "token_throughput_tps": (total_tokens / span) if span > 0 else 0.0,
        "ttft_percentiles_s": _percentiles(ttfts),
        "tbt_percentiles_s": _percentiles(tbts),
        "breakdown_mean_s": breakdown_means,
        "migration": mig_stats,
        "migration_time_share": (total_migration / total_e2e
                                 if total_e2e > 0 else 0.0),
    }
    return SimReport(requests=metrics, meta=meta, aggregates=aggregates,
                     migrations=list(migrations))


@dataclass(frozen=True)
class GoodputResult:
    rate: float
    probes: Tuple[Tuple[float, float], ...]  # (rate, attainment) in order
    n_search_runs: int

    @property
    def n_runs(self) -> int:
        return len(self.probes)


def find_goodput(evaluate_attainment: Callable[[float], float],
                 rate_bounds: Tuple[float, float] = (0.1, 16.0),
                 tolerance: float = 0.05,
                 threshold: float = GOODPUT_ATTAINMENT) -> GoodputResult:
    """Largest rate with attainment >= threshold, to within ``tolerance``.

    Bisects with a probe cache so no rate is replayed twice; the bisection
    itself uses ceil(log2(range / tolerance)) replays, and verifying the
    final bracket ends adds at most two more. Attainment is assumed
    non-increasing in rate; cached probes that contradict this raise a
    warning rather than being trusted silently.
    """
    lo, hi = rate_bounds
    if not (0 < lo < hi):
        raise ValueError("rate_bounds must satisfy 0 < low < high")
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    cache: Dict[float, float] = {}
    probes: List[Tuple[float, float]] = []

    def probe(rate: float) -> float:
        if rate not in cache:
            cache[rate] = evaluate_attainment(rate)
            probes.append((rate, cache[rate]))
        return cache[rate]

    search_runs = 0
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        before = len(probes)
        if probe(mid) >= threshold:
            lo = mid
        else:
            hi = mid
        search_runs += len(probes) - before
    if probe(lo) < threshold:
        raise GoodputInfeasible(
            f"SLO infeasible at minimum rate: attainment "
            f"{cache[lo]:.3f} < {threshold} at {lo} req/s")
    rate = hi if probe(hi) >= threshold else lo
    ordered = sorted(cache.items())
    for (r1, a1), (r2, a2) in zip(ordered, ordered[1:]):
        if a1 < threshold <= a2:
            warnings.warn(
                f"goodput monotonicity violated: attainment {a1:.3f} at "
                f"{r1:.3f} req/s but {a2:.3f} at {r2:.3f} req/s")
            break
    return GoodputResult(rate=rate, probes=tuple(probes),
                         n_search_runs=search_runs)
