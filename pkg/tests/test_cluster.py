"""Event-loop tests: hand event walks, routing, migration wiring,
conservation, breakdown exactness, backpressure, and determinism."""

import json

import pytest

import epdsim as E
from epdsim.cluster import (
    Cluster,
    ClusterConfigError,
    ClusterSpec,
    DisaggregationMethod,
    SimulationDeadlock,
    pool_capacities,
    run_trace,
)
from epdsim.engine import InstanceType

SLO = E.SloSpec(8.0, 0.6)


def spec_of(method, **kw):
    return ClusterSpec(method=DisaggregationMethod.parse(method), **kw)


def one_request_trace(images=(576,), prompt=40, output=5, slo=SLO):
    return E.Trace((E.RequestSpec("r0", 0.0, tuple(images), prompt,
                                  output, slo),))


# -- method parsing and validation -------------------------------------------

def test_method_parse_and_label():
    m = DisaggregationMethod.parse("E:1,P:3,D:4")
    assert m.total_instances == 8
    assert m.label == "E:1,P:3,D:4"
    assert DisaggregationMethod.parse("EPD:4").total_instances == 4


def test_method_validation():
    with pytest.raises(ClusterConfigError):
        DisaggregationMethod.parse("E:0,P:1,D:1")
    with pytest.raises(ClusterConfigError):
        DisaggregationMethod.parse("E:1,P:1")  # no decode capability
    with pytest.raises(ClusterConfigError):
        DisaggregationMethod.parse("bogus")


def test_pool_capacities(model, hw):
    kv_e, img_e = pool_capacities(InstanceType("E"), model, hw, 0.1)
    assert kv_e == 0 and img_e > 0  # encode-only: all free memory to images
    kv_d, img_d = pool_capacities(InstanceType("D"), model, hw, 0.1)
    assert img_d == 0 and kv_d > 0
    kv_p, img_p = pool_capacities(InstanceType("P"), model, hw, 0.1)
    assert kv_p > 0 and img_p > 0  # prefill hosts migrated embeddings


# -- hand event walk ---------------------------------------------------------

def test_single_request_epd_walk(model, hw):
    trace = one_request_trace(output=4)
    report = run_trace(spec_of("EPD:1"), model, hw, SLO, trace,
                       check_invariants=True)
    m = report.requests[0]
    L_e = E.roofline_latency(E.vision_work([576], model), hw)
    L_p = E.roofline_latency(E.language_work([616], [], model), hw)
    assert m.ttft_s == pytest.approx(L_e + L_p)
    # each decode step is one batch at the current context length
    expected_tbt = [
        E.roofline_latency(E.language_work([], [s], model), hw)
        for s in (616, 617, 618)]
    assert list(m.tbt_values) == pytest.approx(expected_tbt)
    assert m.breakdown["encode_exec_s"] == pytest.approx(L_e)
    assert m.breakdown["prefill_exec_s"] == pytest.approx(L_p)
    assert m.breakdown["ep_migration_s"] == 0.0
    assert m.breakdown["pd_migration_s"] == 0.0


def test_preprocess_delay_counts_into_first_queue(model, hw):
    trace = one_request_trace(output=2)
    report = run_trace(spec_of("EPD:1", preprocess_delay=0.01),
                       model, hw, SLO, trace)
    m = report.requests[0]
    assert m.breakdown["encode_queue_s"] == pytest.approx(0.01)


def test_empty_trace(model, hw):
    report = run_trace(spec_of("EPD:1"), model, hw, SLO, E.Trace(()))
    assert report.aggregates["n_requests"] == 0


# -- routing -----------------------------------------------------------------

def test_routing_round_robin(model, hw):
    cluster = Cluster(spec_of("E:2,P:3,D:3"), model, hw, SLO)
    image_req = E.RequestSpec("a", 0.0, (576,), 10, 2, SLO)
    text_req = E.RequestSpec("b", 0.0, (), 10, 2, SLO)

    def route(req):
        state = E.engine.RequestState(spec=req,
                                      plan=E.plan_stages(req))
        return cluster.route(state)

    assert [route(image_req) for _ in range(3)] == ["E0", "E1", "E0"]
    assert [route(text_req) for _ in range(4)] == ["P0", "P1", "P2", "P0"]


def test_router_needs_capable_instances(model, hw):
    # a D-only "cluster" cannot exist (method validation), but a cluster
    # with no prefill-capable entry for text is a config error too; the
    # method invariant already covers capability coverage.
    with pytest.raises(ClusterConfigError):
        DisaggregationMethod.parse("D:4")


# -- migration wiring --------------------------------------------------------

def _mixed_trace(n=30, seed=5, slo=SLO):
    return E.synth_trace(seed=seed, n_requests=n, rate=4.0,
                         image_count_dist=[0, 1, 1], visual_token_choices=576,
                         prompt_dist=[20, 50], output_dist=[20, 60], slo=slo)


def test_migration_hops_match_capability_boundaries(model, hw):
    trace = _mixed_trace()
    n_images = sum(1 for r in trace.requests if r.has_images)

    rep = run_trace(spec_of("E:1,P:2,D:2"), model, hw, SLO, trace,
                    check_invariants=True)
    kinds = [k for k, _ in rep.migrations]
    assert kinds.count("ep") == n_images
    assert kinds.count("pd") == len(trace)

    rep = run_trace(spec_of("EP:2,D:2"), model, hw, SLO, trace,
                    check_invariants=True)
    assert all(k == "pd" for k, _ in rep.migrations)
    assert len(rep.migrations) == len(trace)

    rep = run_trace(spec_of("E:1,PD:2"), model, hw, SLO, trace,
                    check_invariants=True)
    assert all(k == "ep" for k, _ in rep.migrations)
    assert len(rep.migrations) == n_images

    rep = run_trace(spec_of("EPD:2"), model, hw, SLO, trace,
                    check_invariants=True)
    assert rep.migrations == []


def test_ed_p_decode_returns_to_origin(model, hw):
    trace = _mixed_trace()
    cluster = Cluster(spec_of("ED:2,P:2"), model, hw, SLO)
    cluster.run(trace, check_invariants=True)
    for r in cluster.reqs.values():
        if r.spec.has_images:
            # decode ran where the image was encoded
            assert r.current_instance == r.origin_instance
            assert r.origin_instance.startswith("ED")


def test_migration_adds_latency_components(model, hw):
    trace = one_request_trace(output=3)
    rep = run_trace(spec_of("E:1,P:1,D:1"), model, hw, SLO, trace,
                    check_invariants=True)
    m = rep.requests[0]
    overhead = hw.migration_fixed_overhead
    ep_wire = E.image_cache_bytes(576, model) / hw.interconnect_bandwidth
    pd_wire = E.kv_cache_bytes(616, model) / hw.interconnect_bandwidth
    assert m.breakdown["ep_migration_s"] == pytest.approx(overhead + ep_wire)
    assert m.breakdown["pd_migration_s"] == pytest.approx(overhead + pd_wire)


# -- conservation, breakdown, causality --------------------------------------

def test_breakdown_partitions_e2e_exactly(model, hw):
    trace = _mixed_trace(n=60)
    for method in ("EPD:2", "E:1,P:2,D:2", "EP:2,D:2", "ED:2,P:2"):
        rep = run_trace(spec_of(method), model, hw, SLO, trace)
        assert rep.aggregates["n_finished"] == len(trace)
        for m, state_spec in zip(rep.requests, trace.requests):
            total = sum(m.breakdown.values())
            assert m.e2e_s == pytest.approx(total)
            # e2e equals completion - arrival with zero residual
            assert total >= 0
            assert m.ttft_s is not None and m.ttft_s > 0


def test_causal_ordering(model, hw):
    trace = _mixed_trace(n=40)
    cluster = Cluster(spec_of("E:1,P:2,D:2"), model, hw, SLO)
    cluster.run(trace, check_invariants=True)
    for r in cluster.reqs.values():
        assert r.finished
        times = r.token_times
        assert all(b > a for a, b in zip(times, times[1:]))
        if r.t_encode_done is not None:
            assert r.spec.arrival_time <= r.t_encode_done <= r.t_first_token
        assert r.t_first_token <= r.t_done
        assert len(times) == r.spec.output_tokens


def test_determinism_identical_bytes(model, hw, tmp_path):
    trace = _mixed_trace(n=50)
    blobs = []
    for i in range(2):
        rep = run_trace(spec_of("E:1,P:2,D:2"), model, hw, SLO, trace)
        p = tmp_path / f"r{i}.json"
        rep.write_json(p)
        blobs.append(p.read_bytes())
    assert blobs[0] == blobs[1]


# -- memory pressure ---------------------------------------------------------

def _tight_hw(free_bytes):
    return E.HardwareProfile(
        peak_flops=1.48e14, mem_bandwidth=4.0e12,
        gpu_memory_bytes=14e9 + free_bytes, model_weight_bytes=14e9,
        interconnect_bandwidth=200e9)


def test_deadlock_diagnostic_when_request_cannot_fit(model):
    hw = _tight_hw(0.3e9)  # fewer KV blocks than one 616-token request
    trace = one_request_trace(output=5)
    with pytest.raises(SimulationDeadlock, match="unfinished"):
        run_trace(spec_of("EPD:1"), model, hw, SLO, trace)


def test_backpressure_defers_then_completes(model):
    hw = _tight_hw(2.2e9)  # room for roughly two requests in flight
    trace = E.synth_trace(seed=8, n_requests=8, rate=50.0,
                          image_count_dist=1, visual_token_choices=576,
                          prompt_dist=40, output_dist=30, slo=SLO)
    rep = run_trace(spec_of("EPD:1"), model, hw, SLO, trace,
                    check_invariants=True)
    assert rep.aggregates["n_finished"] == 8
    # later arrivals waited on cache blocks, not just on the device
    waits = [m.breakdown["encode_queue_s"] for m in rep.requests]
    assert max(waits) > min(waits)


def test_migration_backpressure_no_overflow(model):
    # tiny decode pool: PD migrations must queue rather than overflow
    hw = _tight_hw(2.2e9)
    trace = E.synth_trace(seed=9, n_requests=6, rate=50.0,
                          image_count_dist=1, visual_token_choices=576,
                          prompt_dist=40, output_dist=20, slo=SLO)
    rep = run_trace(spec_of("EP:1,D:1"), model, hw, SLO, trace,
                    check_invariants=True)
    assert rep.aggregates["n_finished"] == 6
