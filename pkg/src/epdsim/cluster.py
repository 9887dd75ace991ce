"""Deterministic discrete-event simulation of a disaggregated cluster.

Wires instances, the request router, and the migration protocol into one
event loop executing a trace under a chosen disaggregation method. Events
are ordered by (time, creation sequence number) so identical inputs always
produce identical reports.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import metrics as metrics_mod
from .engine import (
    ALL_INSTANCE_TYPES,
    Batch,
    BudgetPair,
    DECODE,
    DEFAULT_IMAGE_CEILING,
    DEFAULT_TOKEN_CEILING,
    ENCODE,
    DONE,
    InstanceState,
    InstanceType,
    PREFILL,
    RequestState,
    STAGE_LEVEL,
    batch_latency,
    derive_latency_cap,
    search_budgets,
)
from .migration import (
    MigrationJob,
    MigrationPhase,
    ROUND_ROBIN,
    TargetSelector,
)
from .model_cost import (
    HardwareProfile,
    IMAGE_BLOCK_TOKENS,
    KV_BLOCK_TOKENS,
    ModelProfile,
    image_cache_bytes,
    kv_cache_bytes,
)
from .workload import SloSpec, Trace, plan_stages


class ClusterConfigError(ValueError):
    """Raised for invalid cluster configurations."""


class SimulationDeadlock(RuntimeError):
    """Raised when no event can make progress but work remains."""


@dataclass(frozen=True)
class DisaggregationMethod:
    """A partition of the cluster into typed instance groups."""

    counts: Tuple[Tuple[InstanceType, int], ...]

    @staticmethod
    def of(**kwargs: int) -> "DisaggregationMethod":
        return DisaggregationMethod.from_dict(
            {InstanceType(k): v for k, v in kwargs.items()})

    @staticmethod
    def from_dict(d: Dict[InstanceType, int]) -> "DisaggregationMethod":
        ordered = tuple((t, d[t]) for t in ALL_INSTANCE_TYPES if t in d)
        return DisaggregationMethod(ordered)

    @staticmethod
    def parse(text: str) -> "DisaggregationMethod":
        """Parse e.g. ``"E:1,P:3,D:4"``."""
        d: Dict[InstanceType, int] = {}
        for part in text.split(","):
            name, _, num = part.strip().partition(":")
            try:
                d[InstanceType(name.strip())] = int(num)
            except ValueError as exc:
                raise ClusterConfigError(
                    f"bad disaggregation method {text!r}: {exc}") from exc
        return DisaggregationMethod.from_dict(d)

    def __post_init__(self):
        if not self.counts:
            raise ClusterConfigError("empty disaggregation method")
        caps = set()
        for itype, n in self.counts:
            if n < 1:
                raise ClusterConfigError(
                    f"instance count for {itype.name} must be >= 1")
            caps.update(itype.name)
        if caps != {"E", "P", "D"}:
            raise ClusterConfigError(
                "capabilities of a method must cover encode, prefill, decode")

    @property
    def total_instances(self) -> int:
        return sum(n for _, n in self.counts)

    @property
    def label(self) -> str:
        return ",".join(f"{t.name}:{n}" for t, n in self.counts)


@dataclass(frozen=True)
class ClusterSpec:
    """Everything needed to build a cluster besides model/hardware/SLO."""

    method: DisaggregationMethod
    policy: str = STAGE_LEVEL
    alpha: float = 0.5
    vision_cap_share: float = 0.5
    token_budget_ceiling: int = DEFAULT_TOKEN_CEILING
    image_budget_ceiling: int = DEFAULT_IMAGE_CEILING
    image_pool_fraction: float = 0.1
    preprocess_delay: float = 0.0
    migration_policy: str = ROUND_ROBIN
    migration_seed: int = 0


def pool_capacities(itype: InstanceType, model: ModelProfile,
                    hw: HardwareProfile,
                    image_pool_fraction: float) -> Tuple[int, int]:
    """(KV blocks, image blocks) an instance of this type can host."""
    avail = hw.gpu_memory_bytes - hw.model_weight_bytes
    has_language = itype.can_prefill or itype.can_decode
    # Image embeddings live wherever they are produced (encode) or consumed
    # (prefill); an encode-only instance devotes all free memory to them.
    if itype.can_encode or itype.can_prefill:
        image_bytes = avail if not has_language else avail * image_pool_fraction
    else:
        image_bytes = 0.0
    kv_bytes_avail = (avail - image_bytes) if has_language else 0.0
    kv_block_bytes = KV_BLOCK_TOKENS * model.kv_bytes_per_token
    image_block_bytes = (IMAGE_BLOCK_TOKENS * model.lang_hidden
                         * model.dtype_bytes)
    return (int(kv_bytes_avail // kv_block_bytes),
            int(image_bytes // image_block_bytes))


def budgets_for_type(itype: InstanceType, slo: SloSpec, model: ModelProfile,
                     hw: HardwareProfile, spec: ClusterSpec,
                     probe_image_tokens: int = IMAGE_BLOCK_TOKENS) -> BudgetPair:
    cap = derive_latency_cap(itype, slo, spec.alpha)
    return search_budgets(
        cap, model, hw,
        ceilings=(spec.token_budget_ceiling, spec.image_budget_ceiling),
        has_language=itype.can_prefill or itype.can_decode,
        has_encode=itype.can_encode,
        vision_cap_share=spec.vision_cap_share,
        probe_image_tokens=probe_image_tokens,
    )


# Event kinds, processed in (time, sequence) order.
_ARRIVAL = "arrival"
_BATCH_DONE = "batch_done"
_MIG_CONTROL = "mig_control"
_MIG_DONE = "mig_done"


class Cluster:
    """One simulated serving cluster; single-owner, sequential state."""

    def __init__(self, spec: ClusterSpec, model: ModelProfile,
                 hw: HardwareProfile, slo: SloSpec,
                 probe_image_tokens: int = IMAGE_BLOCK_TOKENS):
        self.spec = spec
        self.model = model
        self.hw = hw
        self.slo = slo
        self.instances: Dict[str, InstanceState] = {}
        type_budgets: Dict[InstanceType, BudgetPair] = {}
        for itype, count in spec.method.counts:
            if itype not in type_budgets:
                type_budgets[itype] = budgets_for_type(
                    itype, slo, model, hw, spec, probe_image_tokens)
            kv_blocks, image_blocks = pool_capacities(
                itype, model, hw, spec.image_pool_fraction)
            for i in range(count):
                iid = f"{itype.name}{i}"
                self.instances[iid] = InstanceState(
                    iid, itype, kv_blocks, image_blocks,
                    type_budgets[itype], spec.policy)
        self.type_budgets = type_budgets
        self.encode_entry_ids = [i.id for i in self.instances.values()
                                 if i.itype.can_encode]
        self.prefill_entry_ids = [i.id for i in self.instances.values()
                                  if i.itype.can_prefill]
        if not self.encode_entry_ids or not self.prefill_entry_ids:
            raise ClusterConfigError("router needs encode- and "
                                     "prefill-capable instances")
        self.selector = TargetSelector(spec.migration_policy,
                                       spec.migration_seed)
        self.reqs: Dict[str, RequestState] = {}
        self.jobs: Dict[str, MigrationJob] = {}
        self.completed_migrations: List[Tuple[str, float]] = []
        self._heap: List[Tuple[float, int, str, str]] = []
        self._seq = 0
        self._route_cursor = {"image": 0, "text": 0}
        self.now = 0.0
        self.arrived = 0
        self.finished = 0
        self.check_invariants = False

    # -- event plumbing -----------------------------------------------------

    def _push(self, time: float, kind: str, payload: str) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    # -- routing ------------------------------------------------------------

    def route(self, r: RequestState) -> str:
        if r.spec.has_images:
            ids, key = self.encode_entry_ids, "image"
        else:
            ids, key = self.prefill_entry_ids, "text"
        cursor = self._route_cursor[key]
        self._route_cursor[key] = cursor + 1
        return ids[cursor % len(ids)]

    # -- main loop ----------------------------------------------------------

    def run(self, trace: Trace,
            check_invariants: bool = False) -> "metrics_mod.SimReport":
        self.check_invariants = check_invariants
        for req in trace.requests:
            plan = plan_stages(req, self.spec.preprocess_delay)
            state = RequestState(spec=req, plan=plan)
            self.reqs[req.id] = state
            self._push(req.arrival_time + plan.preprocess_delay,
                       _ARRIVAL, req.id)
        while self._heap:
            time, _, kind, payload = heapq.heappop(self._heap)
            self.now = time
            if kind == _ARRIVAL:
                self._on_arrival(payload)
            elif kind == _BATCH_DONE:
                self._on_batch_done(payload)
            elif kind == _MIG_CONTROL:
                self._on_mig_control(payload)
            elif kind == _MIG_DONE:
                self._on_mig_done(payload)
            if self.check_invariants:
                self._assert_invariants()
        if self.finished != self.arrived:
            self._raise_deadlock()
        return metrics_mod.build_report(
            [self.reqs[r.id] for r in trace.requests],
            meta=self._meta(trace),
            migrations=self.completed_migrations,
        )

    def _meta(self, trace: Trace) -> dict:
        return {
            "trace": trace.name,
            "n_requests": len(trace),
            "method": self.spec.method.label,
            "policy": self.spec.policy,
            "slo": {"ttft_s": self.slo.ttft_max, "tbt_s": self.slo.tbt_max},
            "budgets": {
                t.name: {"token_budget": b.token_budget,
                         "image_budget": b.image_budget,
                         "feasible": b.feasible}
                for t, b in self.type_budgets.items()
            },
        }

    # -- event handlers -----------------------------------------------------

    def _on_arrival(self, rid: str) -> None:
        r = self.reqs[rid]
        iid = self.route(r)
        r.origin_instance = iid
        r.current_instance = iid
        self.instances[iid].waiting.append(rid)
        self.arrived += 1
        self._try_schedule(iid)

    def _try_schedule(self, iid: str) -> None:
        inst = self.instances[iid]
        if inst.busy:
            return
        self._admit_migrations(inst)
        batch = inst.form_batch(self.reqs)
        if not batch:
            return
        latency = batch_latency(batch, self.reqs, self.model, self.hw)
        inst.busy = True
        inst.current_batch = batch
        inst.current_latency = latency
        self._push(self.now + latency, _BATCH_DONE, iid)

    def _admit_migrations(self, inst: InstanceState) -> None:
        """Step 2 of the protocol: reserve blocks on the target when the
        migrated request is scheduled; defer under memory pressure."""
        for rid in list(inst.waiting):
            job = self.jobs.get(rid)
            if job is None or job.target != inst.id:
                continue
            if job.phase not in (MigrationPhase.CONTROL_SENT,
                                 MigrationPhase.SCHEDULED):
                continue
            # Reserve the arriving cache plus the full remaining lifetime
            # footprint on this instance, so the migrated request can
            # always run to completion here (same rule as admission).
            kv_need = max(job.kv_blocks,
                          inst.kv_reservation_blocks(self.reqs[rid]))
            if (inst.kv_pool.can_allocate(kv_need)
                    and inst.image_pool.can_allocate(job.image_blocks)):
                inst.kv_pool.allocate(rid, kv_need)
                inst.image_pool.allocate(rid, job.image_blocks)
                inst.waiting.remove(rid)
                job.advance(MigrationPhase.TRANSFERRING)
                job.t_transfer_start = self.now
                self._push(self.now + job.transfer_seconds(self.hw),
                           _MIG_DONE, rid)
            elif job.phase is MigrationPhase.CONTROL_SENT:
                job.advance(MigrationPhase.SCHEDULED)

    def _on_batch_done(self, iid: str) -> None:
        inst = self.instances[iid]
        batch = inst.current_batch
        latency = inst.current_latency
        assert batch is not None
        for rid, _context in batch.decode_entries:
            r = self.reqs[rid]
            r.decode_exec += latency
            r.kv_len += 1
            r.tokens_out += 1
            r.token_times.append(self.now)
            if r.tokens_out >= r.spec.output_tokens:
                self._finish(r, inst)
        for rid, chunk in batch.prefill_chunks:
            r = self.reqs[rid]
            r.prefill_exec += latency
            r.prefill_done += chunk
            r.kv_len = r.prefill_done
            if r.prefill_done >= r.plan.prefill_total_tokens:
                r.t_first_token = self.now
                r.tokens_out = 1
                r.token_times.append(self.now)
                inst.image_pool.release(rid)  # embeddings consumed
                if r.plan.decode_steps == 0:
                    self._finish(r, inst)
                elif inst.itype.can_decode:
                    r.stage = DECODE
                else:
                    self._start_migration(r, inst, "pd")
        for rid, taken, _tokens in batch.encode_entries:
            r = self.reqs[rid]
            r.encode_exec += latency
            r.images_done += taken
            if r.images_done >= r.plan.image_count:
                r.t_encode_done = self.now
                if inst.itype.can_prefill:
                    r.stage = PREFILL
                else:
                    self._start_migration(r, inst, "ep")
        inst.busy = False
        inst.current_batch = None
        inst.current_latency = 0.0
        self._try_schedule(iid)

    def _finish(self, r: RequestState, inst: InstanceState) -> None:
        r.finished = True
        r.stage = DONE
        r.t_done = self.now
        inst.running.remove(r.rid)
        inst.release_all(r.rid)
        self.finished += 1

    # -- migration ----------------------------------------------------------

    def _outstanding_tokens(self) -> Dict[str, float]:
        loads: Dict[str, float] = {iid: 0.0 for iid in self.instances}
        for r in self.reqs.values():
            if r.finished or r.current_instance is None:
                continue
            remaining = (r.remaining_prefill
                         + (r.spec.output_tokens - r.tokens_out))
            loads[r.current_instance] += remaining
        return loads

    def _start_migration(self, r: RequestState, inst: InstanceState,
                         kind: str) -> None:
        inst.running.remove(r.rid)
        if kind == "pd":
            origin = self.instances[r.origin_instance]
            if origin.itype.can_decode and origin.id != inst.id:
                target = origin.id  # keep the request near its image cache
            else:
                candidates = [iid for iid, i in self.instances.items()
                              if i.itype.can_decode and iid != inst.id]
                target = self.selector.select(
                    candidates, self._outstanding_tokens())
        else:
            candidates = [iid for iid, i in self.instances.items()
                          if i.itype.can_prefill and iid != inst.id]
            target = self.selector.select(
                candidates, self._outstanding_tokens())
        job = MigrationJob(
            rid=r.rid, source=inst.id, target=target, kind=kind,
            kv_bytes=kv_cache_bytes(r.kv_len, self.model),
            image_bytes=(image_cache_bytes(r.plan.visual_tokens, self.model)
                         if inst.image_pool.held(r.rid) else 0),
            kv_blocks=inst.kv_pool.held(r.rid),
            image_blocks=inst.image_pool.held(r.rid),
            t_control=self.now,
        )
        self.jobs[r.rid] = job
        r.migrating = True
        self._push(self.now + self.hw.migration_fixed_overhead,
                   _MIG_CONTROL, r.rid)

    def _on_mig_control(self, rid: str) -> None:
        job = self.jobs[rid]
        r = self.reqs[rid]
        r.current_instance = job.target
        self.instances[job.target].waiting.appendleft(rid)
        self._try_schedule(job.target)

    def _on_mig_done(self, rid: str) -> None:
        job = self.jobs.pop(rid)
        r = self.reqs[rid]
        source = self.instances[job.source]
        source.release_all(rid)
        job.advance(MigrationPhase.DONE)
        duration = (self.hw.migration_fixed_overhead
                    + job.transfer_seconds(self.hw))
        if job.kind == "ep":
            r.ep_migration_s += duration
            r.stage = PREFILL
        else:
            r.pd_migration_s += duration
            r.stage = DECODE
        r.migrating = False
        target = self.instances[job.target]
        target.running.append(rid)
        self.completed_migrations.append((job.kind, duration))
        self._try_schedule(job.target)
        self._try_schedule(job.source)

    # -- diagnostics --------------------------------------------------------

    def _raise_deadlock(self) -> None:
        stuck = [r.rid for r in self.reqs.values() if not r.finished]
        details = []
        for iid, inst in self.instances.items():
            details.append(
                f"{iid}: waiting={len(inst.waiting)} "
                f"running={len(inst.running)} "
                f"kv_free={inst.kv_pool.free_blocks} "
                f"image_free={inst.image_pool.free_blocks}")
        raise SimulationDeadlock(
            f"no progress with {len(stuck)} unfinished requests "
            f"(first: {stuck[:5]}); " + "; ".join(details))

    def _assert_invariants(self) -> None:
        seen: Dict[str, str] = {}
        for iid, inst in self.instances.items():
            for rid in list(inst.waiting) + list(inst.running):
                if rid in seen:
                    raise AssertionError(
                        f"request {rid} in both {seen[rid]} and {iid}")
                seen[rid] = iid
            for pool in (inst.kv_pool, inst.image_pool):
                if pool.allocated_blocks > pool.capacity_blocks:
                    raise AssertionError(f"pool overflow on {iid}")
        arrived_active = sum(
            1 for r in self.reqs.values()
            if not r.finished and r.current_instance is not None)
        if self.arrived != self.finished + arrived_active:
            raise AssertionError("request conservation violated")
        for r in self.reqs.values():
            if not r.finished:
                continue
            for inst in self.instances.values():
                if inst.kv_pool.held(r.rid) or inst.image_pool.held(r.rid):
                    raise AssertionError(
                        f"finished request {r.rid} still holds blocks")


def run_trace(spec: ClusterSpec, model: ModelProfile, hw: HardwareProfile,
              slo: SloSpec, trace: Trace, check_invariants: bool = False,
              probe_image_tokens: int = IMAGE_BLOCK_TOKENS
              ) -> "metrics_mod.SimReport":
    """Convenience wrapper: build a fresh cluster and replay the trace."""
    cluster = Cluster(spec, model, hw, slo, probe_image_tokens)
    return cluster.run(trace, check_invariants=check_invariants)
