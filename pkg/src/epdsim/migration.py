"""Pull-based cache migration between instances.

A migration advances through four steps: the source sends control
information and the request is enqueued at the head of the target's waiting
queue; when the target schedules it, equal cache blocks are reserved there
(deferring under memory pressure rather than overflowing); the caches then
transfer at interconnect bandwidth; and on completion the source releases
its blocks exactly once.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .model_cost import HardwareProfile

ROUND_ROBIN = "round_robin"
RANDOM = "random"
LEAST_LOAD = "least_load"
TARGET_POLICIES = (ROUND_ROBIN, RANDOM, LEAST_LOAD)


class MigrationPhase(enum.Enum):
    CONTROL_SENT = "control_sent"
    SCHEDULED = "scheduled"
    TRANSFERRING = "transferring"
    DONE = "done"


_PHASE_ORDER = {
    MigrationPhase.CONTROL_SENT: 0,
    MigrationPhase.SCHEDULED: 1,
    MigrationPhase.TRANSFERRING: 2,
    MigrationPhase.DONE: 3,
}


@dataclass
class MigrationJob:
    """One request's cache handoff from source to target instance."""

    rid: str
    source: str
    target: str
    kind: str  # "ep" or "pd"
    kv_bytes: float
    image_bytes: float
    kv_blocks: int
    image_blocks: int
    phase: MigrationPhase = MigrationPhase.CONTROL_SENT
    t_control: float = 0.0
    t_transfer_start: Optional[float] = None

    def advance(self, phase: MigrationPhase) -> None:
        if _PHASE_ORDER[phase] <= _PHASE_ORDER[self.phase]:
            raise ValueError(f"migration phase must advance, "
                             f"{self.phase} -> {phase}")
        self.phase = phase

    def transfer_seconds(self, hw: HardwareProfile) -> float:
        return (self.kv_bytes + self.image_bytes) / hw.interconnect_bandwidth


class TargetSelector:
    """Deterministic target selection over candidate instances."""

    def __init__(self, kind: str = ROUND_ROBIN, seed: int = 0):
        if kind not in TARGET_POLICIES:
            raise ValueError(f"unknown target policy {kind!r}")
        self.kind = kind
        self._rng = random.Random(seed)
        self._cursors: Dict[Tuple[str, ...], int] = {}

    def select(self, candidates: Sequence[str],
               loads: Optional[Dict[str, float]] = None) -> str:
        if not candidates:
            raise ValueError("no candidate instances for migration target")
        if self.kind == ROUND_ROBIN:
            key = tuple(candidates)
            cursor = self._cursors.get(key, 0)
            self._cursors[key] = cursor + 1
            return candidates[cursor % len(candidates)]
        if self.kind == RANDOM:
            return candidates[self._rng.randrange(len(candidates))]
        loads = loads or {}
        return min(candidates, key=lambda c: (loads.get(c, 0.0),
                                              candidates.index(c)))


def select_target(policy: TargetSelector, candidates: Sequence[str],
                  loads: Optional[Dict[str, float]] = None) -> str:
    return policy.select(candidates, loads)
