"""A tour of the analytical cost model.

Builds per-batch work vectors for the vision and language towers, shows
where the arithmetic-intensity crossover sits, and demonstrates why
running both towers concurrently on one device can beat running them
back to back.

Run: python3 demos/roofline_tour.py
"""

import epdsim as E

model = E.MODEL_PRESETS["llava-1.5-7b"]
hw = E.DEFAULT_HARDWARE

print("== per-batch work ==")
vision = E.vision_work([576], model)          # one image
language = E.language_work([512], [], model)  # one 512-token prefill chunk
print(f"encode one image:    {vision.flops:.3e} flops, "
      f"{vision.bytes:.3e} bytes "
      f"(intensity {E.arithmetic_intensity(vision):.0f})")
print(f"prefill 512 tokens:  {language.flops:.3e} flops, "
      f"{language.bytes:.3e} bytes "
      f"(intensity {E.arithmetic_intensity(language):.0f})")

decode = E.language_work([], [700] * 32, model)  # 32 concurrent decodes
print(f"decode step (32 seqs, 700-token context): "
      f"intensity {E.arithmetic_intensity(decode):.1f} "
      f"(memory-bound: reads the whole KV cache per token)")

print()
print("== intensity crossover ==")
print("effect of adding one image to a language batch:")
for n in (64, 256, 1024, 4096, 8192):
    lang = E.language_work([n], [], model)
    both = vision + lang
    delta = E.arithmetic_intensity(both) - E.arithmetic_intensity(lang)
    direction = "raises" if delta > 0 else "lowers"
    print(f"  {n:>5} language tokens: {direction} combined intensity "
          f"by {abs(delta):7.1f}")

print()
print("== concurrent vision + language execution ==")
lv = E.roofline_latency(vision, hw)
ll = E.roofline_latency(decode, hw)
dual = E.dual_stream_latency(vision, decode, hw)
print(f"encode alone:      {lv * 1e3:7.3f} ms (compute-bound)")
print(f"decode step alone: {ll * 1e3:7.3f} ms (memory-bound)")
print(f"back to back:      {(lv + ll) * 1e3:7.3f} ms")
print(f"concurrent:        {dual * 1e3:7.3f} ms")
print("pooling a compute-bound and a memory-bound batch overlaps their"
      " bottlenecks,")
print("so the combined latency sits between max(a, b) and a + b.")
