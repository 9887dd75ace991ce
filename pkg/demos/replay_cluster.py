"""Replay one synthetic workload on two cluster layouts.

Simulates a captioning-style workload (one image per request, short
prompt, medium generation) on a fully disaggregated cluster and on a
co-located encode+prefill layout, then compares SLO attainment, latency
percentiles, and where each request's time went.

Run: python3 demos/replay_cluster.py
"""

import epdsim as E
from epdsim.cluster import ClusterSpec, DisaggregationMethod, run_trace

model = E.MODEL_PRESETS["llava-1.5-7b"]
hw = E.DEFAULT_HARDWARE
slo = E.SloSpec(ttft_max=4.0, tbt_max=0.08)

trace = E.synth_trace(seed=11, n_requests=400, rate=6.0,
                      image_count_dist=[1], visual_token_choices=576,
                      prompt_dist=[25, 35, 45], output_dist=[90, 110, 130],
                      slo=slo)
print(f"workload: {len(trace)} requests at {E.trace_rate(trace):.1f} req/s, "
      f"one 576-token image each\n")

for label in ("E:1,P:3,D:4", "EP:4,D:4"):
    spec = ClusterSpec(method=DisaggregationMethod.parse(label))
    report = run_trace(spec, model, hw, slo, trace)
    agg = report.aggregates
    print(f"== {label} ==")
    print(f"  SLO attainment   {agg['slo_attainment']:.3f}")
    print(f"  throughput       {agg['throughput_rps']:.2f} req/s, "
          f"{agg['token_throughput_tps']:.0f} tok/s")
    print(f"  TTFT p50/p99     {agg['ttft_percentiles_s']['p50']:.3f} / "
          f"{agg['ttft_percentiles_s']['p99']:.3f} s")
    print(f"  TBT  p50/p99     {agg['tbt_percentiles_s']['p50'] * 1e3:.2f} / "
          f"{agg['tbt_percentiles_s']['p99'] * 1e3:.2f} ms")
    print("  mean time per request by component:")
    for key, val in agg["breakdown_mean_s"].items():
        if val > 1e-6:
            print(f"    {key:<18} {val * 1e3:9.3f} ms")
    if agg["migration"]:
        for kind, stats in agg["migration"].items():
            print(f"  {kind} migrations: {stats['count']}, "
                  f"p95 {stats['p95_s'] * 1e3:.2f} ms")
        print(f"  migration share of request latency: "
              f"{agg['migration_time_share']:.4%}")
    print()
