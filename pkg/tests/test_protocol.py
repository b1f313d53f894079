import numpy as np
import pytest

from conftest import random_mlp
from slip import costmodel, decompose, models, protocol as P, ring
from slip.decompose import Decomposition
from slip.errors import MaskExhaustedError, ProtocolError, ShapeError, TopologyMismatch
from slip.models import Layer, ModelParams


def parties(model, split_ids=(), k=2, budget=1, params=None, **kw):
    params = params or ring.RingParams()
    decs = {i: decompose.split(model.layers[i].weight, k) for i in split_ids}
    c, d = P.build_parties(model, decs, params, seed=7, budget=budget, **kw)
    return c, d, decs, params


def zero_charlie_split(W, k=2):
    """A split whose hidden part is exactly zero."""
    m, n = W.shape
    U, V = np.eye(m)[:, :k], np.eye(n)[:, :k]
    return Decomposition(U, np.zeros(k), V, np.asarray(W, dtype=np.float64), k)


# ---------------------------------------------------------------- precomputation


def test_budget_zero_leaves_pools_empty():
    c, *_ = parties(models.toy_mlp(), [1], budget=0)
    assert c.pool_size() == 0 and not c.cancel_pool


def test_budget_three_gives_three_pairs_for_one_split_layer():
    c, *_ = parties(models.toy_mlp(), [1], budget=3)
    assert c.pool_size(1) == 3 and len(c.cancel_pool) == 3
    assert sorted(k[0] for k in c.mask_pool) == [0, 1, 2]


def test_attention_budget_one_gives_q_k_v_pairs():
    m = models.toy_attention()
    c, *_ = parties(m, budget=1, tokens=4)
    assert sorted((k[1], P.Path(k[2]).name) for k in c.mask_pool) == [(0, "q"), (1, "k"), (2, "v")]


def test_cancellation_masks_match_pads():
    c, *_ = parties(models.toy_mlp(), [0, 2], budget=2)
    for key, r in c.mask_pool.items():
        expect = ring.modmatvec(c.split_layers[key[1]].w_d_int, ring.FixedVec(r.values, r.modulus), c.ring)
        assert np.array_equal(c.cancel_pool[key].values, expect.values)


def test_pads_are_not_shared_across_inferences():
    c, *_ = parties(models.toy_mlp(), [1], budget=2)
    assert not np.array_equal(c.mask_pool[(0, 1, P.Path.main)].values, c.mask_pool[(1, 1, P.Path.main)].values)


# ---------------------------------------------------------------- single layer


def test_hand_trace_2x2_small_ring():
    params = ring.RingParams(97, 1)
    W_d = np.array([[3, -2], [1, 4]])
    a = ring.FixedVec(np.array([5, -7]) % 97, 97)
    r = ring.MaskVec(np.array([90, 13]), 97, "hand@0")
    masked = ring.mask(a, r)
    assert masked.values.tolist() == [95, 6]
    reply = ring.modmatvec(W_d, masked, params)
    assert reply.values.tolist() == [79, 22]
    c = ring.cancellation_mask(W_d, r, 0)
    assert c.values.tolist() == [50, 45]
    out = ring.unmask(reply, c, params)
    assert out.values.tolist() == [29, 74] and out.centered().tolist() == [29, -23]


def test_zero_hidden_part_matches_david_only_compute(rng):
    model = models.toy_mlp((6, 5, 4))
    decs = {0: zero_charlie_split(model.layers[0].weight)}
    params = ring.RingParams()
    c, d = P.build_parties(model, decs, params, budget=1)
    a = ring.quantize(rng.normal(size=6), params)
    got = P.secure_layer_step(c, d, a, 0)
    want = ring.quantize(models.quantized_layer(model, None, params, 0, a), params)
    assert got == want


@pytest.mark.parametrize("secure", [True, False])
def test_random_layers_bit_exact(rng, secure):
    params = ring.RingParams()
    for trial in range(500):
        m, n = (int(v) for v in rng.integers(2, 33, size=2))
        k = int(rng.integers(2, min(m, n) + 1))
        model = models.toy_mlp((n, m), [str(rng.choice(["relu", "identity"]))], seed=trial,
                               bias=bool(trial % 2))
        decs = {0: decompose.split(model.layers[0].weight, k)}
        c, d = P.build_parties(model, decs, params, seed=trial, budget=1)
        a = ring.quantize(rng.normal(size=n), params)
        step = P.secure_layer_step if secure else P.insecure_layer_step
        got = step(c, d, a, 0)
        assert got == ring.quantize(models.quantized_layer(model, decs, params, 0, a), params)


def test_insecure_step_exposes_plaintext_and_matches_secure(rng):
    model = models.toy_mlp((8, 6))
    c, d, decs, params = parties(model, [0], budget=1)
    a = ring.quantize(rng.normal(size=8), params)
    t_ins, t_sec = P.Transcript(), P.Transcript()
    out_ins = P.insecure_layer_step(c, d, a, 0, transcript=t_ins)
    out_sec = P.secure_layer_step(c, d, a, 0, transcript=t_sec)
    assert out_ins == out_sec
    assert t_ins.of_type(P.MaskedActivation)[0].vec == a
    assert t_sec.of_type(P.MaskedActivation)[0].vec != a
    # David's reply in the clear is exactly W_D a
    assert t_ins.of_type(P.MaskedPartial)[0].vec == ring.modmatvec(d.split_layers[0], a, params)


def test_secure_step_consumes_its_pad(rng):
    c, d, _, params = parties(models.toy_mlp((4, 4)), [0], budget=1)
    a = ring.quantize(rng.normal(size=4), params)
    P.secure_layer_step(c, d, a, 0)
    assert c.pool_size() == 0
    with pytest.raises(MaskExhaustedError):
        P.secure_layer_step(c, d, a, 0, inference_id=0)


def test_step_on_unsplit_layer_is_rejected(rng):
    c, d, _, params = parties(models.toy_mlp(), [0])
    with pytest.raises(TopologyMismatch):
        P.secure_layer_step(c, d, ring.quantize(np.zeros(32), params), 1)


# ---------------------------------------------------------------- end to end MLP


def test_random_mlps_bit_exact(rng):
    params = ring.RingParams()
    for trial in range(100):
        model = random_mlp(rng)
        split_ids = [i for i in range(len(model.layers)) if rng.random() < 0.5 and min(model.layers[i].shape) >= 2]
        decs = {i: decompose.split(model.layers[i].weight, 2) for i in split_ids}
        c, d = P.build_parties(model, decs, params, seed=trial, budget=1)
        x = rng.normal(size=model.input_dim)
        assert P.run_mlp_hybrid(c, d, x) == models.forward_reference_quantized(model, x, params, decs)
        assert c.outputs[0] == d.outputs[0]


def test_all_offloaded_sends_no_masked_frames(rng):
    model = models.toy_mlp()
    c, d, _, params = parties(model, [])
    t = P.Transcript()
    out = P.run_mlp_hybrid(c, d, rng.normal(size=16), transcript=t)
    assert not t.of_type(P.MaskedActivation) and not t.of_type(P.MaskedPartial)
    assert [e[1] for e in t.schedule()] == ["InferenceInput", "InferenceOutput"]
    assert c.counter.total_ops == 0 and c.outputs[0] == out


def test_all_split_sends_no_plain_activation(rng):
    model = models.toy_mlp()
    c, d, decs, params = parties(model, [0, 1, 2])
    t = P.Transcript()
    x = rng.normal(size=16)
    assert P.run_mlp_hybrid(c, d, x, transcript=t) == models.forward_reference_quantized(model, x, params, decs)
    assert not t.of_type(P.PlainActivation)
    assert t.schedule()[-1] == (P.C2D, "InferenceOutput")


def test_golden_schedule_five_layers(rng):
    model = models.toy_mlp((8, 8, 8, 8, 8, 8))
    c, d, decs, params = parties(model, [2, 4])
    t = P.Transcript()
    x = rng.normal(size=8)
    assert P.run_mlp_hybrid(c, d, x, transcript=t) == models.forward_reference_quantized(model, x, params, decs)
    assert t.schedule() == [
        (P.D2C, "InferenceInput"),
        (P.D2C, "PlainActivation", 1),
        (P.C2D, "MaskedActivation", 2, "main"),
        (P.D2C, "MaskedPartial", 2, "main"),
        (P.C2D, "PlainActivation", 2),
        (P.D2C, "PlainActivation", 3),
        (P.C2D, "MaskedActivation", 4, "main"),
        (P.D2C, "MaskedPartial", 4, "main"),
        (P.C2D, "InferenceOutput"),
    ]


def test_schedule_depends_only_on_plan(rng):
    model = models.toy_mlp((8, 8, 8, 8, 8, 8))
    schedules = []
    for seed in range(3):
        c, d, _, _ = parties(model, [2, 4])
        t = P.Transcript()
        P.run_mlp_hybrid(c, d, rng.normal(size=8), transcript=t)
        schedules.append(t.schedule())
    assert schedules[0] == schedules[1] == schedules[2]


def test_replayed_or_aborted_inference_raises(rng):
    model = models.toy_mlp()
    c, d, _, _ = parties(model, [1], budget=3)
    x = rng.normal(size=16)
    P.run_mlp_hybrid(c, d, x, inference_id=0)
    with pytest.raises(MaskExhaustedError):
        P.run_mlp_hybrid(c, d, x, inference_id=0)
    c.abort(1)
    assert c.pool_size() == 1
    with pytest.raises(MaskExhaustedError):
        P.run_mlp_hybrid(c, d, x, inference_id=1)
    P.run_mlp_hybrid(c, d, x, inference_id=2)
    with pytest.raises(MaskExhaustedError):
        P.run_mlp_hybrid(c, d, x, inference_id=3)


def test_auto_replenish_draws_fresh_pads(rng):
    c, d, _, _ = parties(models.toy_mlp(), [1], budget=0, auto_replenish=True)
    for iid in range(3):
        P.run_mlp_hybrid(c, d, rng.normal(size=16), inference_id=iid)
    assert c.next_inference_id == 3 and c.pool_size() == 0


def test_insecure_mode_runs_without_pads(rng):
    model = models.toy_mlp()
    c, d, decs, params = parties(model, [1], budget=0, secure=False)
    x = rng.normal(size=16)
    t = P.Transcript()
    assert P.run_mlp_hybrid(c, d, x, transcript=t) == models.forward_reference_quantized(model, x, params, decs)
    masked = t.of_type(P.MaskedActivation)[0]
    assert masked.vec == t.of_type(P.PlainActivation)[0].vec


def test_topology_mismatch():
    c, _, _, _ = parties(models.toy_mlp(), [1])
    _, d, _, _ = parties(models.toy_mlp(), [2])
    with pytest.raises(TopologyMismatch):
        P.run_mlp_hybrid(c, d, np.zeros(16))
    ca, da, _, _ = parties(models.toy_attention(), tokens=2)
    with pytest.raises(TopologyMismatch):
        P.run_mlp_hybrid(ca, da, np.zeros((2, 8)))
    _, d_same, _, _ = parties(models.toy_mlp(), [1])
    with pytest.raises(TopologyMismatch):
        P.run_attention_hybrid(c, d_same, np.zeros(16))


def test_headroom_overflow(rng):
    model = ModelParams([Layer(100.0 * rng.normal(size=(4, 4)))])
    decs = {0: decompose.split(model.layers[0].weight, 2)}
    params = ring.RingParams(scale=1 << 24)
    with pytest.raises(OverflowError):
        P.build_parties(model, decs, params, max_abs_activation=1e6)
    c, d = P.build_parties(model, decs, params, budget=1)
    with pytest.raises(OverflowError):
        P.run_mlp_hybrid(c, d, np.full(4, 1e5))


def test_charlie_rejects_unexpected_messages():
    c, d, _, params = parties(models.toy_mlp(), [1])
    with pytest.raises(ProtocolError):
        c.handle(P.PlainActivation(5, 0, ring.quantize(np.zeros(32), params)))
    with pytest.raises(ProtocolError):
        c.handle(P.SetupParams(params, c.topology))


def test_input_width_is_checked():
    _, d, _, _ = parties(models.toy_mlp(), [1])
    with pytest.raises(ShapeError):
        d.start(np.zeros(5))


# ---------------------------------------------------------------- attention


def test_attention_random_k2_split_exact(rng):
    model = models.toy_attention(8, 8, seed=4)
    c, d, decs, params = parties(model, [0, 1, 2], k=2, tokens=4)
    X = rng.normal(size=(4, 8))
    out = P.run_attention_hybrid(c, d, X)
    assert out == models.forward_reference_quantized(model, X, params, decs)
    np.testing.assert_allclose(ring.dequantize(out, params), models.forward_reference(model, X), atol=1e-4)


def test_attention_zero_hidden_part_equals_david_only(rng):
    model = models.toy_attention(6, 4, seed=2)
    decs = {i: zero_charlie_split(model.layers[i].weight) for i in range(3)}
    params = ring.RingParams()
    c, d = P.build_parties(model, decs, params, budget=1, tokens=3)
    X = rng.normal(size=(3, 6))
    assert P.run_attention_hybrid(c, d, X) == models.forward_reference_quantized(model, X, params)


def test_attention_single_token_identity(rng):
    d_ = 4
    model = ModelParams([Layer(np.eye(d_), layer_type=t) for t in ("attn_q", "attn_k", "attn_v", "attn_o")],
                        "attention_head")
    c, d, _, params = parties(model, tokens=1)
    x = rng.normal(size=(1, d_))
    out = ring.dequantize(P.run_attention_hybrid(c, d, x), params)
    np.testing.assert_allclose(out, models.forward_reference(model, x), atol=1e-5)


def test_attention_schedule_and_split_output_projection(rng):
    model = models.toy_attention(8, 8, seed=1)
    c, d, decs, params = parties(model, [3], tokens=2)
    t = P.Transcript()
    X = rng.normal(size=(2, 8))
    assert P.run_attention_hybrid(c, d, X, transcript=t) == models.forward_reference_quantized(model, X, params, decs)
    assert t.schedule() == [
        (P.D2C, "InferenceInput"),
        (P.C2D, "MaskedActivation", 0, "q"),
        (P.D2C, "MaskedPartial", 0, "q"),
        (P.C2D, "MaskedActivation", 1, "k"),
        (P.D2C, "MaskedPartial", 1, "k"),
        (P.C2D, "MaskedActivation", 2, "v"),
        (P.D2C, "MaskedPartial", 2, "v"),
        (P.C2D, "MaskedActivation", 3, "main"),
        (P.D2C, "MaskedPartial", 3, "main"),
        (P.C2D, "InferenceOutput"),
    ]


def test_attention_too_many_tokens(rng):
    c, d, _, _ = parties(models.toy_attention(), tokens=2)
    with pytest.raises(ShapeError):
        P.run_attention_hybrid(c, d, rng.normal(size=(3, 8)))


# ---------------------------------------------------------------- counters


def test_counters_match_cost_formula_with_no_extra_noise(rng):
    l, n, k = 4, 8, 2
    model = models.toy_mlp((n,) * (l + 1), ["relu"] * l, bias=False)
    c, d, _, _ = parties(model, [0, 2], k=k)
    t = P.Transcript()
    P.run_mlp_hybrid(c, d, rng.normal(size=n), transcript=t)
    shape = costmodel.protocol_shape(costmodel.ModelShape(l=l, l_d=2, n=n, m=n, b=1, k=k, l_v=5))
    fb = costmodel.flops_breakdown(shape)
    assert c.counter.flops == fb.flops_cloud
    assert d.counter.flops == fb.flops_edge
    sent = sum(msg.vec.values.size for msg in t.of_type(P.InferenceInput) + t.of_type(P.MaskedActivation)
               + t.of_type(P.MaskedPartial))
    assert sent == fb.transfer_values
    # the offline pad work is counted separately
    assert c.offline_counter.macs == 2 * n * n


def test_charlie_share_is_small_for_low_rank_splits(rng):
    model = models.toy_mlp((64, 64, 64, 64), bias=False)
    c, d, _, _ = parties(model, [0, 2], k=2)
    P.run_mlp_hybrid(c, d, rng.normal(size=64))
    monolithic = sum(l.weight.size for l in model.layers)
    assert c.counter.macs <= 0.1 * monolithic
