import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slip import decompose as D
from slip import models
from slip.errors import (
    DensityWarning,
    DomainError,
    PlanShapeMismatch,
    RankError,
    UnknownLayerError,
    UnsafeSplitError,
)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# ---------------------------------------------------------------- svd


def test_svd_identity():
    np.testing.assert_array_equal(D.svd(np.eye(3))[1], [1, 1, 1])


def test_svd_rank_one_outer_product():
    u = np.array([2.0, 0, 0])
    v = np.array([0, 3.0, 0, 0])
    S = D.svd(np.outer(u, v))[1]
    assert S[0] == pytest.approx(6.0, rel=1e-14)
    assert np.all(S[1:] < 1e-12)


def test_svd_reconstructs_random_matrix(rng):
    W = rng.normal(size=(50, 30))
    U, S, V = D.svd(W)
    assert rel(U @ np.diag(S) @ V.T, W) <= 1e-10
    np.testing.assert_allclose(U.T @ U, np.eye(30), atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(30), atol=1e-10)
    assert np.all(np.diff(S) <= 0)


def test_svd_sign_convention(rng):
    U = D.svd(rng.normal(size=(10, 6)))[0]
    pivot = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    assert np.all(pivot > 0)


def test_svd_tie_order_is_original_index():
    U, S, V = D.svd(np.diag([1.0, 2.0, 2.0]))
    np.testing.assert_array_equal(S, [2, 2, 1])
    assert np.argmax(np.abs(U[:, 0])) == 1 and np.argmax(np.abs(U[:, 1])) == 2


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError):
        D.svd(np.array([[np.inf, 1.0]]))


# ---------------------------------------------------------------- split


def test_split_diagonal():
    dec = D.split(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(dec.S, [3, 2])
    np.testing.assert_allclose(dec.david_part, np.diag([0, 0, 1.0]), atol=1e-15)


def test_split_full_rank_leaves_zero_residual(rng):
    W = rng.normal(size=(6, 4))
    assert np.all(D.split(W, 4).david_part == 0)


def test_split_random_64(rng):
    W = rng.normal(size=(64, 64))
    dec = D.split(W, 8)
    assert rel(dec.reconstruct(), W) <= 1e-10
    S = D.svd(W)[1]
    np.testing.assert_allclose(D.svd(dec.david_part)[1][:8], S[8:16], atol=1e-8)


def test_split_rejects_unsafe_and_excess_rank(rng):
    W = rng.normal(size=(5, 5))
    with pytest.raises(UnsafeSplitError):
        D.split(W, 1)
    D.split(W, 1, allow_unsafe=True)
    with pytest.raises(RankError):
        D.split(np.outer([1.0, 2], [1.0, 1]), 2)
    with pytest.raises(UnsafeSplitError):
        D.split(W, 0, allow_unsafe=True)


def test_decomposition_factored_apply_matches_dense(rng):
    W = rng.normal(size=(7, 5))
    dec = D.split(W, 3)
    a = rng.normal(size=(4, 5))
    np.testing.assert_allclose(dec.apply(a), a @ dec.charlie_dense().T, atol=1e-12)
    assert dec.charlie_params == 3 * (7 + 5 + 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.floats(-10, 10)),
       st.integers(2, 12))
def test_split_additivity_and_spectrum(W, k):
    U, S, V = D.svd(W)
    r = D.numerical_rank(S)
    if r < 2:
        return
    k = min(k, r)
    dec = D.split(W, k)
    assert np.linalg.norm(dec.reconstruct() - W) <= 1e-10 * max(np.linalg.norm(W), 1e-300)
    rest = D.svd(dec.david_part)[1][: r - k] if r > k else np.array([])
    np.testing.assert_allclose(rest, S[k:r], atol=1e-8 * max(S[0], 1))


def test_residual_norm_non_increasing_in_k(rng):
    W = rng.normal(size=(20, 15))
    norms = [np.linalg.norm(D.split(W, k).david_part) for k in range(2, 16)]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_split_is_deterministic(rng):
    W = rng.normal(size=(12, 9))
    a, b = D.split(W, 4), D.split(W, 4)
    for x, y in [(a.U, b.U), (a.S, b.S), (a.V, b.V), (a.david_part, b.david_part)]:
        assert np.array_equal(x, y)


def test_spectral_profile_examples(rng):
    np.testing.assert_allclose(D.spectral_profile(np.eye(4)), [1, 1, 1, 1])
    np.testing.assert_allclose(D.spectral_profile(np.diag([9.0, 4, 1])), [9, 4, 1])
    n = 100
    top = D.spectral_profile(rng.normal(size=(n, n)))[0]
    assert 0.5 * np.sqrt(n) <= top <= 4 * np.sqrt(n)


# ---------------------------------------------------------------- plans


def test_empty_plan_offloads_everything():
    m = models.toy_mlp()
    assert D.plan_decomposition(m, D.SplitPlan([])) == {}
    assert D.parameter_density(D.SplitPlan([]), m).eta == 0


def test_plan_single_layer():
    m = models.toy_mlp((16, 32, 32, 8))
    decs = D.plan_decomposition(m, D.SplitPlan([(1, "generic", 4)]))
    assert list(decs) == [1] and decs[1].k == 4
    assert D.SplitPlan([(1, "generic", 4)]).offloaded_layers(m) == {(0, "generic"), (2, "generic")}


def test_plan_validation():
    with pytest.raises(ValueError):
        D.SplitPlan([(0, "generic", 3), (0, "generic", 4)])
    with pytest.raises(UnsafeSplitError):
        D.SplitPlan([(0, "generic", 1)])
    with pytest.raises(UnknownLayerError):
        D.plan_decomposition(models.toy_mlp(), D.SplitPlan([(9, "generic", 2)]))


def test_plan_json_round_trip():
    plan = D.SplitPlan([{"block": 0, "layer_type": "attn_q", "K": 50}, (11, "mlp_fc", 8)])
    again = D.SplitPlan.from_json(plan.to_json())
    assert again.triplets == plan.triplets


def test_default_strategy_five_blocks_each_side():
    m = models.toy_transformer(12, 16, 32)
    plan = D.default_strategy(m, head_blocks=5, tail_blocks=5, K=8)
    blocks = {t.block for t in plan.triplets}
    assert blocks == {0, 1, 2, 3, 4, 7, 8, 9, 10, 11}
    assert len(plan) == 60
    report = D.parameter_density(plan, m)
    assert 0 < report.eta < 1


def test_density_hand_counts():
    m = models.ModelParams([models.Layer(np.eye(4))])
    with pytest.warns(DensityWarning):
        r = D.parameter_density(D.SplitPlan([(0, "generic", 2)]), m)
    assert (r.charlie_params, r.total_params, r.eta) == (18, 16, Fraction(9, 8))


def test_density_large_layer_flops():
    m = models.ModelParams([models.Layer(np.zeros((4096, 4096)))])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = D.parameter_density(D.SplitPlan([(0, "generic", 50)]), m)
    assert r.charlie_flops_per_token == 819_200
    assert r.david_flops_per_token == 33_554_432
    assert r.charlie_flops_per_token / r.david_flops_per_token == pytest.approx(0.0244, abs=1e-4)


def test_density_identity_is_exact():
    m = models.toy_transformer(3, 16, 24)
    r = D.parameter_density(D.default_strategy(m, 1, 1, 5), m)
    assert r.eta * r.total_params == r.charlie_params


def test_density_shape_mismatch():
    m = models.toy_mlp((4, 3, 2))
    with pytest.raises(PlanShapeMismatch):
        D.parameter_density(D.SplitPlan([(0, "generic", 4)]), m)
    with pytest.raises(PlanShapeMismatch):
        D.parameter_density(D.SplitPlan([(7, "generic", 2)]), m)


def test_usefulness_ratio():
    assert D.usefulness_ratio(0.3, 0.3) == 1
    assert D.usefulness_ratio(0.1, 10) == pytest.approx(0.01)
    with pytest.raises(DomainError):
        D.usefulness_ratio(0, 1)
    assert D.is_k_useful(0.01, 0.9) and not D.is_k_useful(0.5, 0.9)
