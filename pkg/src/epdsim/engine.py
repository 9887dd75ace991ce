"""One simulated inference instance.

Holds the typed capability set, waiting/running queues, paged KV and image
cache pools, and the per-batch budgets. Batch formation supports three
policies: the stage-level scheduler (decodes unconditionally, chunked
prefill and encode under searched token/image budgets), a prefill-prioritized
baseline that admits whole prompts ahead of decodes, and a stall-free
chunked baseline with a token budget but no image budget.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from .model_cost import (
    HardwareProfile,
    ModelProfile,
    WorkVector,
    dual_stream_latency,
    image_blocks_needed,
    kv_blocks_needed,
    language_work,
    roofline_latency,
    vision_work,
    IMAGE_BLOCK_TOKENS,
    KV_BLOCK_TOKENS,
)
from .workload import RequestSpec, SloSpec, StagePlan

DEFAULT_TOKEN_CEILING = 16384
DEFAULT_IMAGE_CEILING = 128

STAGE_LEVEL = "stage_level"
PREFILL_PRIORITIZED = "prefill_prioritized"
STALL_FREE_CHUNKED = "stall_free_chunked"
POLICIES = (STAGE_LEVEL, PREFILL_PRIORITIZED, STALL_FREE_CHUNKED)


@dataclass(frozen=True, order=True)
class InstanceType:
    """Capability set of an instance, named E/P/D/EP/ED/PD/EPD."""

    name: str

    _VALID = ("E", "P", "D", "EP", "ED", "PD", "EPD")

    def __post_init__(self):
        if self.name not in self._VALID:
            raise ValueError(f"unknown instance type {self.name!r}")

    @property
    def can_encode(self) -> bool:
        return "E" in self.name

    @property
    def can_prefill(self) -> bool:
        return "P" in self.name

    @property
    def can_decode(self) -> bool:
        return "D" in self.name


ALL_INSTANCE_TYPES = tuple(InstanceType(n)
                           for n in ("E", "P", "D", "EP", "ED", "PD", "EPD"))


def derive_latency_cap(itype: InstanceType, slo: SloSpec,
                       alpha: float = 0.5) -> float:
    """Per-batch latency cap: a first-token request crosses an encode and a
    prefill iteration, so TTFT-bound instances get ``alpha * ttft``; any
    instance that decodes is held to the TBT bound."""
    if itype.can_decode:
        return slo.tbt_max
    return alpha * slo.ttft_max


@dataclass(frozen=True)
class BudgetPair:
    token_budget: int
    image_budget: int
    feasible: bool = True

    def __post_init__(self):
        if self.token_budget < 1 or self.image_budget < 0:
            raise ValueError("budgets below floors")


def _largest_true(lo: int, hi: int, pred) -> int:
    """Largest n in [lo, hi] with pred(n), assuming pred is monotone
    decreasing and pred(lo) holds."""
    if pred(hi):
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def search_budgets(cap: float, model: ModelProfile, hw: HardwareProfile,
                   ceilings: Tuple[int, int] = (DEFAULT_TOKEN_CEILING,
                                                DEFAULT_IMAGE_CEILING),
                   *, has_language: bool = True, has_encode: bool = False,
                   vision_cap_share: float = 0.5,
                   probe_image_tokens: int = IMAGE_BLOCK_TOKENS) -> BudgetPair:
    """Binary-search the largest per-batch token and image budgets whose
    probe batches fit the latency cap.

    When an instance runs both towers, the cap is split between the streams
    (``vision_cap_share`` to the vision probe, the rest to the language
    probe); pooled dual-stream demand of a full co-scheduled batch then
    still fits the cap. Single-tower instances get the full cap. Returns
    floor budgets with ``feasible=False`` when even a one-token or
    one-image probe violates its share.
    """
    if cap <= 0:
        raise ValueError("cap must be > 0")
    token_ceiling, image_ceiling = ceilings
    both = has_language and has_encode
    token_cap = cap * (1.0 - vision_cap_share) if both else cap
    vision_cap = cap * vision_cap_share if both else cap

    def lat_tokens(n: int) -> float:
        return roofline_latency(language_work([n], [], model), hw)

    def lat_images(e: int) -> float:
        return roofline_latency(vision_work([probe_image_tokens] * e, model), hw)

    feasible = True
    if lat_tokens(1) <= token_cap:
        token_budget = _largest_true(1, token_ceiling,
                                     lambda n: lat_tokens(n) <= token_cap)
    else:
        token_budget = 1
        if has_language:
            feasible = False

    image_budget = 0
    if has_encode:
        if lat_images(1) <= vision_cap:
            image_budget = _largest_true(1, image_ceiling,
                                         lambda e: lat_images(e) <= vision_cap)
        else:
            # Floor of one image keeps encode work flowing (batches will
            # exceed the cap and miss the SLO, which the flag records).
            image_budget = 1
            feasible = False
    return BudgetPair(token_budget, image_budget, feasible)


class CachePool:
    """Paged block pool with a per-request allocation map."""

    def __init__(self, block_size: int, capacity_blocks: int):
        if block_size < 1 or capacity_blocks < 0:
            raise ValueError("invalid pool geometry")
        self.block_size = block_size
        self.capacity_blocks = capacity_blocks
        self.alloc: Dict[str, int] = {}

    @property
    def allocated_blocks(self) -> int:
        return sum(self.alloc.values())

    @property
    def free_blocks(self) -> int:
        return self.capacity_blocks - self.allocated_blocks

    def held(self, rid: str) -> int:
        return self.alloc.get(rid, 0)

    def can_allocate(self, n_blocks: int) -> bool:
        return n_blocks <= self.free_blocks

    def allocate(self, rid: str, n_blocks: int) -> None:
        if n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if n_blocks == 0:
            return
        if not self.can_allocate(n_blocks):
            raise MemoryError(f"pool exhausted allocating {n_blocks} blocks "
                              f"for {rid}")
        self.alloc[rid] = self.alloc.get(rid, 0) + n_blocks

    def release(self, rid: str) -> int:
        return self.alloc.pop(rid, 0)


ENCODE = "encode"
PREFILL = "prefill"
DECODE = "decode"
DONE = "done"


@dataclass
class RequestState:
    """A request's progress cursor plus per-request latency accounting."""

    spec: RequestSpec
    plan: StagePlan
    stage: str = ENCODE
    images_done: int = 0
    prefill_done: int = 0
    kv_len: int = 0
    tokens_out: int = 0
    origin_instance: Optional[str] = None
    current_instance: Optional[str] = None
    migrating: bool = False
    finished: bool = False

    t_encode_done: Optional[float] = None
    t_first_token: Optional[float] = None
    t_done: Optional[float] = None
    encode_exec: float = 0.0
    prefill_exec: float = 0.0
    decode_exec: float = 0.0
    ep_migration_s: float = 0.0
    pd_migration_s: float = 0.0
    token_times: List[float] = field(default_factory=list)

    @property
    def rid(self) -> str:
        return self.spec.id

    @property
    def remaining_images(self) -> int:
        return self.plan.image_count - self.images_done

    @property
    def remaining_prefill(self) -> int:
        return self.plan.prefill_total_tokens - self.prefill_done

    def __post_init__(self):
        if not self.plan.needs_encode and self.stage == ENCODE:
            self.stage = PREFILL


@dataclass
class Batch:
    """One scheduled iteration: decode entries (request id, context length),
    prefill chunks (request id, chunk tokens), encode entries (request id,
    image count, per-image token counts)."""

    decode_entries: List[Tuple[str, int]] = field(default_factory=list)
    prefill_chunks: List[Tuple[str, int]] = field(default_factory=list)
    encode_entries: List[Tuple[str, int, Tuple[int, ...]]] = field(
        default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.decode_entries or self.prefill_chunks
                    or self.encode_entries)

    @property
    def token_count(self) -> int:
        return (len(self.decode_entries)
                + sum(c for _, c in self.prefill_chunks))

    @property
    def image_count(self) -> int:
        return sum(k for _, k, _ in self.encode_entries)


class InstanceState:
    """One engine: capability type, queues, cache pools, budgets, policy."""

    def __init__(self, instance_id: str, itype: InstanceType,
                 kv_capacity_blocks: int, image_capacity_blocks: int,
                 budgets: BudgetPair, policy: str = STAGE_LEVEL):
        if policy not in POLICIES:
            raise ValueError(f"unknown scheduler policy {policy!r}")
        self.id = instance_id
        self.itype = itype
        self.waiting: Deque[str] = collections.deque()
        self.running: List[str] = []
        self.kv_pool = CachePool(KV_BLOCK_TOKENS, kv_capacity_blocks)
        self.image_pool = CachePool(IMAGE_BLOCK_TOKENS, image_capacity_blocks)
        self.budgets = budgets
        self.policy = policy
        self.busy = False
        self.current_batch: Optional[Batch] = None
        self.current_latency: float = 0.0

    # -- allocation helpers -------------------------------------------------

    def _grow_kv(self, rid: str, target_tokens: int) -> bool:
        """Ensure KV blocks cover ``target_tokens``; False if pool is full."""
        need = kv_blocks_needed(target_tokens) - self.kv_pool.held(rid)
        if need <= 0:
            return True
        if not self.kv_pool.can_allocate(need):
            return False
        self.kv_pool.allocate(rid, need)
        return True

    def kv_reservation_blocks(self, r: RequestState) -> int:
        """KV blocks this request needs over its lifetime here: its whole
        prompt, plus one token per decode step if this instance decodes."""
        tokens = r.plan.prefill_total_tokens
        if self.itype.can_decode:
            tokens += r.plan.decode_steps
        return kv_blocks_needed(tokens)

    def _admit_waiting(self, r: RequestState) -> bool:
        """Reserve every cache block the request will need on this
        instance. Reserving the full footprint up front means admitted
        work can always run to completion — an over-subscribed pool defers
        admissions instead of stranding half-allocated requests."""
        image_need = 0
        if r.stage == ENCODE:
            image_need = (image_blocks_needed(r.plan.visual_tokens)
                          - self.image_pool.held(r.rid))
        kv_need = 0
        if self.itype.can_prefill:
            kv_need = self.kv_reservation_blocks(r) - self.kv_pool.held(r.rid)
        if not (self.image_pool.can_allocate(max(0, image_need))
                and self.kv_pool.can_allocate(max(0, kv_need))):
            return False
        self.image_pool.allocate(r.rid, max(0, image_need))
        self.kv_pool.allocate(r.rid, max(0, kv_need))
        return True

    def release_all(self, rid: str) -> None:
        self.kv_pool.release(rid)
        self.image_pool.release(rid)

    # -- batch formation ----------------------------------------------------

    def form_batch(self, reqs: Dict[str, RequestState]) -> Batch:
        """Form the next batch under this instance's policy, performing
        cache admissions and allocations as entries are accepted. Requests
        mid-migration are skipped."""
        if self.policy == STAGE_LEVEL:
            return self._form_stage_level(reqs)
        if self.policy == PREFILL_PRIORITIZED:
            return self._form_prefill_prioritized(reqs)
        return self._form_stall_free(reqs)

    def _pending_images(self, r: RequestState, taken: int) -> Tuple[int, ...]:
        counts = r.spec.image_token_counts
        return tuple(counts[r.images_done:r.images_done + taken])

    def _form_stage_level(self, reqs: Dict[str, RequestState]) -> Batch:
        tau_t = self.budgets.token_budget
        tau_e = self.budgets.image_budget
        batch = Batch()
        n_t = 0
        n_e = 0
        # 1: every running decode joins unconditionally (stall freedom);
        # an entry only defers if its next token cannot get a cache block.
        for rid in self.running:
            r = reqs[rid]
            if r.stage == DECODE:
                if not self._grow_kv(rid, r.kv_len + 1):
                    continue
                batch.decode_entries.append((rid, r.kv_len))
                n_t += 1
        # 2: partially processed prefills and encodes, chunked to budget.
        for rid in self.running:
            r = reqs[rid]
            if r.stage == PREFILL and n_t < tau_t:
                chunk = min(r.remaining_prefill, tau_t - n_t)
                if chunk > 0 and self._grow_kv(rid, r.prefill_done + chunk):
                    batch.prefill_chunks.append((rid, chunk))
                    n_t += chunk
            elif r.stage == ENCODE and n_e < tau_e:
                take = min(r.remaining_images, tau_e - n_e)
                if take > 0:
                    batch.encode_entries.append(
                        (rid, take, self._pending_images(r, take)))
                    n_e += take
        # 3: admit waiting requests into the leftover budgets. Text-only
        # requests take the prefill path; requests with images enter via
        # the encode path only. Admission requires cache blocks.
        for rid in list(self.waiting):
            r = reqs[rid]
            if r.migrating:
                continue
            if r.stage == ENCODE:
                if n_e >= tau_e:
                    continue
                if not self._admit_waiting(r):
                    continue
                take = min(r.remaining_images, tau_e - n_e)
                self.waiting.remove(rid)
                self.running.append(rid)
                batch.encode_entries.append(
                    (rid, take, self._pending_images(r, take)))
                n_e += take
            elif r.stage == PREFILL:
                if n_t >= tau_t:
                    continue
                chunk = min(r.remaining_prefill, tau_t - n_t)
                if not self._admit_waiting(r):
                    continue
                self.waiting.remove(rid)
                self.running.append(rid)
                batch.prefill_chunks.append((rid, chunk))
                n_t += chunk
        return batch

    def _form_prefill_prioritized(self, reqs: Dict[str, RequestState]) -> Batch:
        """Whole-prompt prefills (and full encodes) run ahead of decodes;
        decodes only run when no first-token work exists."""
        tau_t = self.budgets.token_budget
        batch = Batch()
        n_t = 0
        for rid in self.running:
            r = reqs[rid]
            if r.stage == PREFILL:
                if self._grow_kv(rid, r.plan.prefill_total_tokens):
                    batch.prefill_chunks.append((rid, r.remaining_prefill))
                    n_t += r.remaining_prefill
            elif r.stage == ENCODE:
                take = r.remaining_images
                batch.encode_entries.append(
                    (rid, take, self._pending_images(r, take)))
        for rid in list(self.waiting):
            r = reqs[rid]
            if r.migrating:
                continue
            if r.stage == ENCODE:
                if not self._admit_waiting(r):
                    continue
                self.waiting.remove(rid)
                self.running.append(rid)
                take = r.remaining_images
                batch.encode_entries.append(
                    (rid, take, self._pending_images(r, take)))
            elif r.stage == PREFILL:
                if n_t >= tau_t:
                    continue
                if not self._admit_waiting(r):
                    continue
                self.waiting.remove(rid)
                self.running.append(rid)
                batch.prefill_chunks.append((rid, r.remaining_prefill))
                n_t += r.remaining_prefill
        if batch:
            return batch
        for rid in self.running:
            r = reqs[rid]
            if r.stage == DECODE and self._grow_kv(rid, r.kv_len + 1):
                batch.decode_entries.append((rid, r.kv_len))
        return batch

    def _form_stall_free(self, reqs: Dict[str, RequestState]) -> Batch:
        """Decode-first chunked batching under a token budget, with encode
        work admitted unbudgeted (no image budget)."""
        tau_t = self.budgets.token_budget
        batch = Batch()
        n_t = 0
        for rid in self.running:
            r = reqs[rid]
            if r.stage == DECODE:
                if not self._grow_kv(rid, r.kv_len + 1):
                    continue
                batch.decode_entries.append((rid, r.kv_len))
                n_t += 1
        for rid in self.running:
            r = reqs[rid]
            if r.stage == PREFILL and n_t < tau_t:
                chunk = min(r.remaining_prefill, tau_t - n_t)
                if chunk > 0 and self._grow_kv(rid, r.prefill_done + chunk):
                    batch.prefill_chunks.append((rid, chunk))
                    n_t += chunk
            elif r.stage == ENCODE:
                take = r.remaining_images
                batch.encode_entries.append(
                    (rid, take, self._pending_images(r, take)))
        for rid in list(self.waiting):
            r = reqs[rid]
            if r.migrating:
                continue
            if r.stage == ENCODE:
                if not self._admit_waiting(r):
                    continue
                self.waiting.remove(rid)
                self.running.append(rid)
                take = r.remaining_images
                batch.encode_entries.append(
                    (rid, take, self._pending_images(r, take)))
            elif r.stage == PREFILL:
                if n_t >= tau_t:
                    continue
                chunk = min(r.remaining_prefill, tau_t - n_t)
                if not self._admit_waiting(r):
                    continue
                self.waiting.remove(rid)
                self.running.append(rid)
                batch.prefill_chunks.append((rid, chunk))
                n_t += chunk
        return batch


def batch_latency(batch: Batch, reqs: Dict[str, RequestState],
                  model: ModelProfile, hw: HardwareProfile) -> float:
    """Latency of one batch: vision and language streams pooled."""
    image_tokens: List[int] = []
    for _, _, tokens in batch.encode_entries:
        image_tokens.extend(tokens)
    vision = vision_work(image_tokens, model)
    language = language_work([c for _, c in batch.prefill_chunks],
                             [s for _, s in batch.decode_entries], model)
    return dual_stream_latency(vision, language, hw)
