"""Profiler pipeline: workload summary, stage budgets, proportional
partition, candidate enumeration, and heuristic vs. brute-force selection."""

import dataclasses

import pytest

import epdsim as E
from epdsim.profiler import (
    ProfilerError,
    brute_force_select,
    candidate_methods,
    decode_concurrency_cap,
    enumerate_methods,
    estimate_throughputs,
    partition,
    plan_partition,
    search_space_size,
    select_method,
    stage_budgets,
    summarize_workload,
)

SLO = E.SloSpec(4.0, 0.08)


def fixed_trace(n=2, images=1, prompt=40, output=100, rate=1.0, seed=0):
    return E.synth_trace(seed=seed, n_requests=n, rate=rate,
                         image_count_dist=images, visual_token_choices=576,
                         prompt_dist=prompt, output_dist=output, slo=SLO)


def test_summarize_worked_example():
    s = summarize_workload(fixed_trace(n=2))
    assert (s.W_e, s.W_p, s.W_d, s.N_r) == (1152, 1232, 200, 2)


def test_summarize_text_only_and_promptless():
    t = E.synth_trace(seed=1, n_requests=3, rate=1.0, image_count_dist=0,
                      visual_token_choices=576, prompt_dist=50,
                      output_dist=10, slo=SLO)
    assert summarize_workload(t).W_e == 0
    t2 = E.Trace((E.RequestSpec("a", 0.0, (576, 576), 0, 1, SLO),))
    assert summarize_workload(t2).W_p == 1152
    with pytest.raises(ProfilerError):
        summarize_workload(E.Trace(()))


def test_decode_concurrency_cap_worked_example():
    # 100 GiB free, 716 tokens/request at 0.5 MiB/token, gamma 0.9
    model = E.ModelProfile(4096, 32, 32, 1024, 16, 24)  # 0.5 MiB/token
    assert model.kv_bytes_per_token == 524_288
    hw = E.HardwareProfile(1e14, 4e12, 100 * 2**30 + 14e9, 14e9, 200e9)
    summary = E.WorkloadSummary(W_e=576, W_p=616, W_d=100, N_r=1)
    # (616 + 100) / 1 = 716 tokens per request
    assert decode_concurrency_cap(summary, model, hw, gamma=0.9) == 257


def test_stage_budgets(model, hw):
    summary = summarize_workload(fixed_trace(n=10))
    tau_e, tau_p, tau_d = stage_budgets(SLO, model, hw, summary)
    assert tau_e >= 1 and tau_p >= 1 and tau_d >= 1
    # decode budget respects both the TBT search and the memory cap
    assert tau_d <= decode_concurrency_cap(summary, model, hw)
    # shrinking gamma to nothing makes decode memory infeasible
    with pytest.raises(ProfilerError, match="memory infeasible"):
        stage_budgets(SLO, model, hw, summary, gamma=1e-9)


def test_stage_budget_memory_cap_binds(model):
    summary = summarize_workload(fixed_trace(n=10))
    small = E.HardwareProfile(1.48e14, 4e12, 14e9 + 2e9, 14e9, 200e9)
    loose = E.SloSpec(4.0, 1000.0)  # huge TBT: only memory can bind
    _, _, tau_d = stage_budgets(loose, model, small, summary)
    assert tau_d == decode_concurrency_cap(summary, model, small)


def test_estimate_throughputs(model, hw):
    summary = summarize_workload(fixed_trace(n=10))
    budgets = stage_budgets(SLO, model, hw, summary)
    tp_e, tp_p, tp_d = estimate_throughputs(budgets, model, hw, summary)
    assert tp_e > 0 and tp_p > 0 and tp_d > 0
    # prefill throughput definition: budget tokens / full-batch latency
    lat = E.roofline_latency(E.language_work([budgets[1]], [], model), hw)
    assert tp_p == pytest.approx(budgets[1] / lat)
    # roofline linearity: doubling compute doubles a compute-bound tp
    fast = dataclasses.replace(hw, peak_flops=2 * hw.peak_flops)
    tp_p_fast = estimate_throughputs(budgets, model, fast, summary)[1]
    assert tp_p_fast == pytest.approx(2 * tp_p, rel=0.05)


def test_partition_examples():
    assert partition(3, 1.0, 1.0, 1.0) == (1, 1, 1)
    assert partition(8, 1.0, 3.0, 4.0) == (1, 3, 4)
    assert partition(3, 1.0, 1.0, 98.0) == (1, 1, 1)
    with pytest.raises(ProfilerError):
        partition(2, 1.0, 1.0, 1.0)


def test_partition_properties():
    import random
    rng = random.Random(3)
    for _ in range(200):
        n = rng.randrange(3, 20)
        times = [rng.uniform(0.01, 10) for _ in range(3)]
        counts = partition(n, *times)
        assert sum(counts) == n
        assert min(counts) >= 1
        # scale invariance
        scaled = partition(n, *(t * 7.5 for t in times))
        assert scaled == counts


def test_candidate_methods():
    c1, c2, c3 = candidate_methods(1, 3, 4)
    assert c1.label == "E:1,P:3,D:4"
    assert dict(c2.counts) == {E.InstanceType("EP"): 4,
                               E.InstanceType("D"): 4}
    assert dict(c3.counts) == {E.InstanceType("ED"): 5,
                               E.InstanceType("P"): 3}
    for c in candidate_methods(1, 1, 1):
        assert c.total_instances == 3


def test_search_space_size():
    assert search_space_size(8) == 35
    assert search_space_size(3) == 5
    assert search_space_size(2) == 2
    for n in range(2, 12):
        assert len(enumerate_methods(n)) == search_space_size(n)


def test_enumeration_contains_heuristic_candidates():
    methods = {m.label for m in enumerate_methods(8)}
    for c in candidate_methods(1, 3, 4):
        assert c.label in methods


FAST = dict(rate_bounds=(0.5, 6.0), tolerance=0.5)


def test_select_method_containment(model, hw):
    trace = fixed_trace(n=40, output=60, rate=2.0, seed=4)
    sel = select_method(trace, 3, SLO, model, hw, **FAST)
    labels = [m.label for m, _ in sel.table]
    assert sel.best.label in labels
    assert sel.best_goodput == max(g for _, g in sel.table)
    assert len(sel.table) == 3
    # determinism
    again = select_method(trace, 3, SLO, model, hw, **FAST)
    assert [(m.label, g) for m, g in again.table] == \
        [(m.label, g) for m, g in sel.table]


def test_oracle_dominance(model, hw):
    trace = fixed_trace(n=40, output=60, rate=2.0, seed=4)
    sel = select_method(trace, 3, SLO, model, hw, **FAST)
    oracle = brute_force_select(trace, 3, SLO, model, hw, **FAST)
    assert len(oracle.table) == search_space_size(3)
    assert oracle.best_goodput >= sel.best_goodput
    oracle_labels = {m.label for m, _ in oracle.table}
    assert sel.best.label in oracle_labels


def test_infeasible_candidate_scores_zero(model):
    # hardware too slow for the TBT bound: every replay misses the SLO
    slow = E.HardwareProfile(1e11, 1e9, 141e9, 14e9, 200e9)
    trace = fixed_trace(n=10, output=20, rate=1.0)
    with pytest.raises(ProfilerError, match="infeasible"):
        select_method(trace, 3, SLO, model, slow, **FAST)
