"""Plan a cluster deployment from a workload sample.

Walks the planning pipeline end to end: summarize the workload, derive
per-stage batch budgets from the latency bounds, estimate per-stage
throughputs, split the instances proportionally to estimated stage time,
and finally pick the best disaggregation method by replaying the
candidates and comparing their goodput (the highest request rate that
still meets the SLO for at least 90% of requests).

Run: python3 demos/plan_deployment.py
"""

import epdsim as E
from epdsim.profiler import (
    estimate_throughputs,
    plan_partition,
    select_method,
    stage_budgets,
    summarize_workload,
)

model = E.MODEL_PRESETS["llava-1.5-7b"]
hw = E.DEFAULT_HARDWARE
slo = E.SloSpec(ttft_max=4.0, tbt_max=0.08)
N = 6

trace = E.synth_trace(seed=4, n_requests=60, rate=2.0,
                      image_count_dist=[1, 2], visual_token_choices=576,
                      prompt_dist=[40, 80], output_dist=[60, 100], slo=slo)

summary = summarize_workload(trace)
print("== workload summary (per-request averages) ==")
print(f"  visual tokens {summary.avg_image_tokens:.0f}, "
      f"prefill tokens {summary.W_p / summary.N_r:.0f}, "
      f"decode tokens {summary.W_d / summary.N_r:.0f}")

tau_e, tau_p, tau_d = stage_budgets(slo, model, hw, summary)
print("\n== per-stage batch budgets under the latency bounds ==")
print(f"  encode  {tau_e} images per batch")
print(f"  prefill {tau_p} tokens per batch")
print(f"  decode  {tau_d} concurrent sequences")

tp = estimate_throughputs((tau_e, tau_p, tau_d), model, hw, summary)
print("\n== estimated stage throughputs ==")
print(f"  encode  {tp[0]:,.0f} visual tokens/s")
print(f"  prefill {tp[1]:,.0f} tokens/s")
print(f"  decode  {tp[2]:,.0f} tokens/s")

plan = plan_partition(trace, N, slo, model, hw)
print(f"\n== proportional split of {N} instances ==")
print(f"  encode {plan.N_e}, prefill {plan.N_p}, decode {plan.N_d}")

result = select_method(trace, N, slo, model, hw,
                       rate_bounds=(0.5, 8.0), tolerance=0.25)
print("\n== candidate methods by replayed goodput ==")
for method, goodput in result.table:
    mark = "  <- selected" if method.label == result.best.label else ""
    print(f"  {method.label:<16} {goodput:5.2f} req/s{mark}")
