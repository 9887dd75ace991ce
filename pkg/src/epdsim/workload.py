"""Requests, SLOs, traces, and per-stage plans.

Traces are JSON Lines, one request per line with keys ``id``, ``arrival_s``,
``image_tokens`` (list), ``prompt_tokens``, ``output_tokens``, and optional
``ttft_slo_s`` / ``tbt_slo_s`` overrides.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union


class TraceError(ValueError):
    """Raised for malformed or inconsistent trace files."""


@dataclass(frozen=True)
class SloSpec:
    ttft_max: float
    tbt_max: float

    def __post_init__(self):
        if self.ttft_max <= 0 or self.tbt_max <= 0:
            raise ValueError("SLO bounds must be > 0")


@dataclass(frozen=True)
class RequestSpec:
    id: str
    arrival_time: float
    image_token_counts: Sequence[int]
    prompt_tokens: int
    output_tokens: int
    slo: SloSpec

    def __post_init__(self):
        if self.arrival_time < 0:
            raise ValueError(f"request {self.id}: arrival_time must be >= 0")
        if self.prompt_tokens < 0 or any(t < 0 for t in self.image_token_counts):
            raise ValueError(f"request {self.id}: token counts must be >= 0")
        if self.output_tokens < 1:
            raise ValueError(f"request {self.id}: output_tokens must be >= 1")

    @property
    def visual_tokens(self) -> int:
        return sum(self.image_token_counts)

    @property
    def has_images(self) -> bool:
        return len(self.image_token_counts) > 0


@dataclass(frozen=True)
class Trace:
    requests: Sequence[RequestSpec]
    name: str = ""
    source: str = ""

    def __post_init__(self):
        ids = [r.id for r in self.requests]
        if len(set(ids)) != len(ids):
            raise TraceError("duplicate request ids in trace")
        arrivals = [r.arrival_time for r in self.requests]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise TraceError("arrival times must be nondecreasing")

    def __len__(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class StagePlan:
    """A request decomposed into its encode / prefill / decode workload."""

    image_count: int
    visual_tokens: int
    prefill_total_tokens: int
    decode_steps: int
    preprocess_delay: float

    @property
    def needs_encode(self) -> bool:
        return self.image_count > 0


def plan_stages(r: RequestSpec, preprocess_delay: float = 0.0) -> StagePlan:
    """Decompose a request: the prompt and visual tokens form the prefill
    input, and the first output token is produced by the prefill pass."""
    n = r.visual_tokens
    return StagePlan(
        image_count=len(r.image_token_counts),
        visual_tokens=n,
        prefill_total_tokens=n + r.prompt_tokens,
        decode_steps=r.output_tokens - 1,
        preprocess_delay=preprocess_delay,
    )


def _request_from_record(rec: dict, lineno: int,
                         default_slo: Optional[SloSpec]) -> RequestSpec:
    try:
        rid = str(rec["id"])
        arrival = float(rec["arrival_s"])
        image_tokens = [int(t) for t in rec.get("image_tokens", [])]
        prompt = int(rec["prompt_tokens"])
        output = int(rec["output_tokens"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"line {lineno}: {exc}") from exc
    if "ttft_slo_s" in rec or "tbt_slo_s" in rec:
        if not ("ttft_slo_s" in rec and "tbt_slo_s" in rec):
            raise TraceError(f"line {lineno}: SLO overrides require both "
                             "ttft_slo_s and tbt_slo_s")
        slo = SloSpec(float(rec["ttft_slo_s"]), float(rec["tbt_slo_s"]))
    elif default_slo is not None:
        slo = default_slo
    else:
        raise TraceError(f"line {lineno}: no SLO in record and no default given")
    try:
        return RequestSpec(rid, arrival, tuple(image_tokens), prompt, output, slo)
    except ValueError as exc:
        raise TraceError(f"line {lineno}: {exc}") from exc


def load_trace(path: Union[str, Path],
               default_slo: Optional[SloSpec] = None,
               name: str = "") -> Trace:
    """Load and validate a JSON Lines trace, sorted by arrival (stable)."""
    path = Path(path)
    requests: List[RequestSpec] = []
    seen = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: invalid JSON: {exc}") from exc
            req = _request_from_record(rec, lineno, default_slo)
            if req.id in seen:
                raise TraceError(f"line {lineno}: duplicate id {req.id!r}")
            seen.add(req.id)
            requests.append(req)
    requests.sort(key=lambda r: r.arrival_time)
    return Trace(tuple(requests), name=name or path.stem, source=str(path))


def save_trace(trace: Trace, path: Union[str, Path],
               include_slo: bool = True) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for r in trace.requests:
            rec = {
                "id": r.id,
                "arrival_s": r.arrival_time,
                "image_tokens": list(r.image_token_counts),
                "prompt_tokens": r.prompt_tokens,
                "output_tokens": r.output_tokens,
            }
            if include_slo:
                rec["ttft_slo_s"] = r.slo.ttft_max
                rec["tbt_slo_s"] = r.slo.tbt_max
            fh.write(json.dumps(rec) + "\n")


def convert_csv_trace(csv_path: Union[str, Path],
                      out_path: Union[str, Path],
                      default_slo: Optional[SloSpec] = None) -> Trace:
    """Convert a CSV trace (same column names; ``image_tokens`` as a JSON
    list or semicolon-separated integers) to the JSON Lines format."""
    csv_path = Path(csv_path)
    requests: List[RequestSpec] = []
    seen = set()
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            raw = (row.get("image_tokens") or "").strip()
            if not raw:
                image_tokens = []
            elif raw.startswith("["):
                image_tokens = json.loads(raw)
            else:
                image_tokens = [int(t) for t in raw.split(";") if t.strip()]
            rec = {k: v for k, v in row.items() if v not in (None, "")}
            rec["image_tokens"] = image_tokens
            req = _request_from_record(rec, lineno, default_slo)
            if req.id in seen:
                raise TraceError(f"line {lineno}: duplicate id {req.id!r}")
            seen.add(req.id)
            requests.append(req)
    requests.sort(key=lambda r: r.arrival_time)
    trace = Trace(tuple(requests), name=csv_path.stem, source=str(csv_path))
    save_trace(trace, out_path)
    return trace


def trace_rate(trace: Trace) -> float:
    """Mean request rate: count over the first-to-last arrival span."""
    if len(trace) < 2:
        raise TraceError("rate undefined for traces with fewer than 2 requests")
    span = trace.requests[-1].arrival_time - trace.requests[0].arrival_time
    if span <= 0:
        raise TraceError("rate undefined: identical first and last timestamps")
    return len(trace) / span


def scale_to_rate(trace: Trace, target_rate: float) -> Trace:
    """Rescale inter-arrival gaps to hit ``target_rate`` requests/second,
    preserving the relative arrival pattern and the first timestamp."""
    if target_rate <= 0:
        raise ValueError("target_rate must be > 0")
    current = trace_rate(trace)
    scale = current / target_rate
    first = trace.requests[0].arrival_time
    scaled = tuple(
        replace(r, arrival_time=first + (r.arrival_time - first) * scale)
        for r in trace.requests
    )
    return Trace(scaled, name=trace.name, source=trace.source)


def _sample(dist, rng: random.Random) -> int:
    if isinstance(dist, int):
        return dist
    return rng.choice(list(dist))


def synth_trace(seed: int, n_requests: int, rate: float,
                image_count_dist: Union[int, Sequence[int]],
                visual_token_choices: Union[int, Sequence[int]],
                prompt_dist: Union[int, Sequence[int]],
                output_dist: Union[int, Sequence[int]],
                slo: SloSpec, name: str = "synthetic") -> Trace:
    """Deterministic synthetic trace with exponential inter-arrivals.

    Each distribution argument is either a constant or a sequence sampled
    uniformly.
    """
    if rate <= 0:
        raise ValueError("rate must be > 0")
    rng = random.Random(seed)
    requests: List[RequestSpec] = []
    t = 0.0
    for i in range(n_requests):
        if i > 0:
            t += rng.expovariate(rate)
        n_images = _sample(image_count_dist, rng)
        image_tokens = tuple(_sample(visual_token_choices, rng)
                             for _ in range(n_images))
        requests.append(RequestSpec(
            id=f"r{i}",
            arrival_time=t,
            image_token_counts=image_tokens,
            prompt_tokens=_sample(prompt_dist, rng),
            output_tokens=max(1, _sample(output_dist, rng)),
            slo=slo,
        ))
    return Trace(tuple(requests), name=name, source=f"synth(seed={seed})")
