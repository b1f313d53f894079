"""Split a small MLP between a trusted and an untrusted party and run it.

Charlie keeps the top singular components of two layers; David gets the
residual of those layers plus every other layer in full.  The hybrid run
must reproduce the monolithic quantized forward pass bit for bit.
"""

import numpy as np

from slip import decompose, models, protocol as P, ring

model = models.toy_mlp((16, 32, 32, 32, 8), seed=0)
params = ring.RingParams()

# Hide two singular components of the first and the third layer.
decs = {i: decompose.split(model.layers[i].weight, 2) for i in (0, 2)}
for i, dec in decs.items():
    m, n = dec.shape
    print(f"layer {i}: {m}x{n}, Charlie keeps k={dec.k} components ({dec.charlie_params} of {m * n} numbers)")

charlie, david = P.build_parties(model, decs, params, seed=1, budget=2)
print(f"\nprecomputed pads: {charlie.pool_size()} (two inferences x two split layers)")

x = np.random.default_rng(0).normal(size=16)
transcript = P.Transcript()
out = P.run_mlp_hybrid(charlie, david, x, transcript=transcript)

print("\nmessage schedule:")
for entry in transcript.schedule():
    print("  ", *entry)

oracle = models.forward_reference_quantized(model, x, params, decs)
print("\nbit-exact against the local quantized reference:", out == oracle)
print("max deviation from float64 forward pass:",
      np.max(np.abs(ring.dequantize(out, params) - models.forward_reference(model, x))))

# The masked payload David saw for layer 0 bears no resemblance to the input.
masked = transcript.of_type(P.MaskedActivation)[0].vec
print("\nfirst residues David received:", masked.values[:4])
print("first residues of the real input:", ring.quantize(x, params).values[:4])

# Pads are single use: replaying inference 0 is refused.
try:
    P.run_mlp_hybrid(charlie, david, x, inference_id=0)
except Exception as exc:  # noqa: BLE001 - printed for the reader
    print(f"\nreplaying inference 0 -> {type(exc).__name__}: {exc}")
