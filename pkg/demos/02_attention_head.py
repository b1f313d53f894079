"""The two-round attention exchange.

Q and K are computed from separately masked copies of the token matrix.
Charlie forms the softmax mixing in the clear on its side, masks the mixed
tokens again for the value projection, and finishes with the output
projection.
"""

import numpy as np

from slip import decompose, models, protocol as P, ring

tokens, d, d_h = 4, 8, 8
model = models.toy_attention(d, d_h, seed=3)
params = ring.RingParams()
decs = {i: decompose.split(model.layers[i].weight, 2) for i in range(4)}

charlie, david = P.build_parties(model, decs, params, seed=2, budget=1, tokens=tokens)
X = np.random.default_rng(4).normal(size=(tokens, d))
t = P.Transcript()
out = P.run_attention_hybrid(charlie, david, X, transcript=t)

for entry in t.schedule():
    print("  ", *entry)
print("bit-exact vs quantized reference:", out == models.forward_reference_quantized(model, X, params, decs))
print("max deviation from float reference:",
      float(np.max(np.abs(ring.dequantize(out, params) - models.forward_reference(model, X)))))
print("Charlie multiply-adds:", charlie.counter.macs, " David multiply-adds:", david.counter.macs)
