"""Run Charlie as a TCP service and David as a client on loopback.

The frames David exchanges over the socket are identical, byte for byte, to
the frames of an in-memory run with the same seed.
"""

import numpy as np

from slip import decompose, models, protocol as P, ring, transport as T

model = models.toy_mlp((16, 32, 8), seed=5)
decs = {0: decompose.split(model.layers[0].weight, 4)}
params = ring.RingParams()
x = np.linspace(-1, 1, 16)


def parties():
    return P.build_parties(model, decs, params, seed=9, budget=1, session_id=1)


charlie, _ = parties()
server = T.serve_charlie(T.EndpointConfig("charlie", ("127.0.0.1", 0)), charlie)
print("Charlie listening on %s:%d" % server.address)
try:
    _, david = parties()
    with T.DavidClient(T.EndpointConfig("david", server.address, session_id=1), david) as client:
        out = client.infer(x)
        frames = client.frames
finally:
    server.stop()

c_mem, d_mem = parties()
t = P.Transcript()
P.run_mlp_hybrid(c_mem, d_mem, x, transcript=t)
print(f"{len(frames)} frames, {sum(len(f) for _, f in frames)} bytes on the wire")
print("identical to the in-memory transcript:", frames == T.transcript_frames(t, 1))
print("output:", np.round(ring.dequantize(out, params), 4))
