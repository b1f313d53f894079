"""Closed-form edge/cloud cost for a large decoder, and a check that the
formulas count the same operations the protocol actually performs."""

import numpy as np

from slip import costmodel as C
from slip import decompose, models, protocol as P, ring

report = C.preset_report("decoder-4096")
print("\n".join(report.lines()))

# A toy run: four 8x8 layers, two of them split with k=2.
model = models.toy_mlp((8,) * 5, ["relu"] * 4, bias=False)
decs = {i: decompose.split(model.layers[i].weight, 2) for i in (0, 2)}
charlie, david = P.build_parties(model, decs, ring.RingParams(), budget=1)
P.run_mlp_hybrid(charlie, david, np.ones(8))

fb = C.flops_breakdown(C.ModelShape(l=4, l_d=2, n=8, m=8, k=2))
print(f"\ntoy run: cloud FLOPs counted {charlie.counter.flops}, formula {fb.flops_cloud}")
print(f"toy run: edge FLOPs counted {david.counter.flops}, formula {fb.flops_edge}")
