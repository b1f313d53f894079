"""What David can and cannot learn.

1. Without masks, a handful of queries let David solve for a layer's weight.
2. With masks, the same least-squares code recovers nothing.
3. Hiding a single singular component is not enough: the residual's null
   space gives it away.  Hiding two leaves a free direction.
4. Masked payloads are indistinguishable from uniform noise.
"""

import numpy as np

from slip import decompose, protocol as P, redteam as R, ring
from slip.errors import DegenerateError
from slip.models import Layer, ModelParams

n = 16
params = ring.RingParams(scale=1 << 24)
rng = np.random.default_rng(0)
W = rng.normal(size=(n, n)) / np.sqrt(n)
model = ModelParams([Layer(W)])

for secure in (False, True):
    c, d = P.build_parties(model, {0: decompose.split(W, 2)}, params, secure=secure, auto_replenish=True)
    transcripts = []
    for _ in range(n + 10):
        transcripts.append(P.Transcript())
        P.run_mlp_hybrid(c, d, rng.normal(size=n), transcript=transcripts[-1])
    report, _ = R.linear_equation_attack(transcripts, 0, params, true_weight=W)
    label = "secure  " if secure else "insecure"
    print(f"{label} protocol: weight error {report.success_metric:.2e} -> {report.verdict}")

U, S, V = decompose.svd(W)
report, _ = R.subspace_attack_k1(decompose.split(W, 1, allow_unsafe=True).david_part, (U[:, 0], V[:, 0]))
print(f"\nk=1 split: hidden singular vectors recovered with |cos| = {report.success_metric:.12f}")
try:
    R.subspace_attack_k1(decompose.split(W, 2).david_part)
except DegenerateError as exc:
    print(f"k=2 split: {exc} ({exc.free_dims} free dimensions)")

samples = R.collect_masked_coordinates(17, 1000, runs=100, seed=0)
print(f"\nmasked payloads, L=17, {samples.size} residues: p = {R.uniformity_distinguisher(samples, 17):.3f}")
plain = R.collect_masked_coordinates(17, 1000, runs=100, seed=0, secure=False)
print(f"unmasked payloads of a constant input:      p = {R.uniformity_distinguisher(plain, 17):.1e}")
