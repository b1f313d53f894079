"""Low-rank splitting of weight matrices between Charlie and David.

Charlie keeps the top-k singular triplets of a layer in factored form and
David receives the dense remainder.  Layers not named in a plan go to David
whole.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import (
    ConvergenceError,
    DensityWarning,
    DomainError,
    PlanShapeMismatch,
    RankError,
    UnknownLayerError,
    UnsafeSplitError,
)
from .models import Layer, LayerType, ModelParams
from .schema import stamp, unstamp

RANK_RTOL = 1e-12
DEFAULT_K = 50


def _as_matrix(W) -> np.ndarray:
    if isinstance(W, Layer):
        W = W.weight
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or min(W.shape) < 1:
        raise ValueError(f"expected a non-empty matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    return W


def svd(W):
    """Thin SVD with a fixed ordering and sign convention.

    Singular values are sorted descending with ties kept in their original
    index order, and each left vector is flipped so its largest-magnitude
    entry is positive.  Returns ``(U, S, V)`` with ``W = U diag(S) V^T``.
    """
    W = _as_matrix(W)
    try:
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    order = np.argsort(-S, kind="stable")
    U, S, V = U[:, order], S[order], Vt[order].T
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivot, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, S, V * signs


def numerical_rank(S) -> int:
    S = np.asarray(S)
    if S.size == 0 or S[0] == 0:
        return 0
    return int(np.sum(S > RANK_RTOL * S[0]))


def spectral_profile(W) -> np.ndarray:
    """Full singular spectrum, largest first."""
    return svd(W)[1]


@dataclass(eq=False)
class Decomposition:
    """``W = U diag(S) V^T + david_part`` with the first term kept by Charlie."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    david_part: np.ndarray
    k: int
    layer_id: tuple | None = None
    US: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.US = self.U * self.S

    @property
    def shape(self):
        return self.david_part.shape

    def apply(self, a) -> np.ndarray:
        """Charlie's product ``W_C a`` in factored form; rows of a 2-D ``a`` are vectors."""
        return (np.asarray(a, dtype=np.float64) @ self.V) @ self.US.T

    def charlie_dense(self) -> np.ndarray:
        return self.US @ self.V.T

    def reconstruct(self) -> np.ndarray:
        return self.charlie_dense() + self.david_part

    @property
    def charlie_params(self) -> int:
        m, n = self.shape
        return self.k * (m + n + 1)


def split(W, k: int, allow_unsafe: bool = False, layer_id=None) -> Decomposition:
    """Hide the top ``k`` singular components of ``W`` from David.

    ``k < 2`` leaves the hidden direction recoverable from David's residual
    and is refused unless ``allow_unsafe`` is set.
    """
    W = _as_matrix(W)
    if k < 1 or (k < 2 and not allow_unsafe):
        raise UnsafeSplitError(f"k={k}: at least two singular components must stay hidden")
    U, S, V = svd(W)
    r = numerical_rank(S)
    if k > r:
        raise RankError(f"k={k} exceeds rank {r}")
    rest = slice(k, r)
    david = (U[:, rest] * S[rest]) @ V[:, rest].T
    return Decomposition(U[:, :k].copy(), S[:k].copy(), V[:, :k].copy(), david, k, layer_id)


# ---------------------------------------------------------------- plans


class SplitTriplet(NamedTuple):
    block: int
    layer_type: str
    K: int


@dataclass
class SplitPlan:
    triplets: list = field(default_factory=list)
    allow_unsafe: bool = False

    def __post_init__(self):
        cleaned, seen = [], set()
        for t in self.triplets:
            if isinstance(t, dict):
                t = (t["block"], t["layer_type"], t["K"])
            block, layer_type, K = t
            t = SplitTriplet(int(block), LayerType(layer_type).value, int(K))
            if (t.block, t.layer_type) in seen:
                raise ValueError(f"duplicate triplet for block {t.block}, {t.layer_type}")
            if t.K < 2 and not self.allow_unsafe:
                raise UnsafeSplitError(f"K={t.K} for block {t.block} {t.layer_type}; K must be >= 2")
            seen.add((t.block, t.layer_type))
            cleaned.append(t)
        self.triplets = cleaned

    def __len__(self):
        return len(self.triplets)

    def resolve(self, model: ModelParams) -> dict:
        """Layer index -> K for every triplet; unknown layers raise."""
        out = {}
        for t in self.triplets:
            idx = model.index_of(t.block, t.layer_type)
            if idx is None:
                raise UnknownLayerError(f"model has no layer (block={t.block}, {t.layer_type})")
            out[idx] = t.K
        return out

    def offloaded_layers(self, model: ModelParams) -> set:
        split_idx = set(self.resolve(model))
        return {l.layer_id for i, l in enumerate(model.layers) if i not in split_idx}

    def to_json(self) -> str:
        return json.dumps(stamp({"triplets": [t._asdict() for t in self.triplets]}))

    @classmethod
    def from_json(cls, text: str, allow_unsafe=False) -> "SplitPlan":
        """Read a plan written by :meth:`to_json`, or a bare list of triplets."""
        data = json.loads(text)
        if isinstance(data, dict):
            data = unstamp(data)["triplets"]
        return cls(data, allow_unsafe=allow_unsafe)

    @classmethod
    def load(cls, path) -> "SplitPlan":
        with open(path) as fh:
            return cls.from_json(fh.read())


def default_strategy(model: ModelParams, head_blocks=1, tail_blocks=1, K=DEFAULT_K) -> SplitPlan:
    """Split every layer of the first ``head_blocks`` and last ``tail_blocks`` blocks."""
    blocks = sorted({l.block for l in model.layers})
    chosen = set(blocks[:head_blocks]) | set(blocks[len(blocks) - tail_blocks:] if tail_blocks else [])
    return SplitPlan([(l.block, l.layer_type.value, K) for l in model.layers if l.block in chosen])


def plan_decomposition(model: ModelParams, strategy: SplitPlan) -> dict:
    """Split each addressed layer; every other layer stays whole with David."""
    decs = {}
    for idx, K in strategy.resolve(model).items():
        layer = model.layers[idx]
        decs[idx] = split(layer.weight, K, allow_unsafe=strategy.allow_unsafe, layer_id=layer.layer_id)
    return decs


@dataclass(frozen=True)
class DensityReport:
    eta: Fraction
    charlie_params: int
    total_params: int
    charlie_flops_per_token: int
    david_flops_per_token: int

    @property
    def charlie_flop_share(self) -> float:
        total = self.charlie_flops_per_token + self.david_flops_per_token
        return self.charlie_flops_per_token / total if total else 0.0


def parameter_density(plan: SplitPlan, model: ModelParams, batch: int = 1) -> DensityReport:
    """Parameter share and per-token FLOPs of each party under ``plan``.

    Charlie stores ``k(m + n + 1)`` numbers per split layer and spends
    ``2k(m + n)`` FLOPs on it; David spends ``2mn`` on every layer.
    """
    try:
        ks = plan.resolve(model)
    except UnknownLayerError as exc:
        raise PlanShapeMismatch(str(exc)) from exc
    charlie_params = charlie_flops = david_flops = 0
    for idx, layer in enumerate(model.layers):
        m, n = layer.shape
        david_flops += 2 * m * n * batch
        if idx in ks:
            k = ks[idx]
            if k > min(m, n):
                raise PlanShapeMismatch(f"K={k} exceeds min dimension of layer {layer.layer_id} {layer.shape}")
            charlie_params += k * (m + n + 1)
            charlie_flops += 2 * k * (m + n) * batch
    total = model.n_params
    eta = Fraction(charlie_params, total)
    if eta > 1:
        warnings.warn(f"factored storage {charlie_params} exceeds dense size {total}", DensityWarning, stacklevel=2)
    return DensityReport(eta, charlie_params, total, charlie_flops, david_flops)


def usefulness_ratio(full_risk: float, extended_risk: float) -> float:
    """Ratio of the full model's risk to the attacker-extended model's risk."""
    if not (full_risk > 0 and extended_risk > 0):
        raise DomainError("risks must be strictly positive")
    return full_risk / extended_risk


def is_k_useful(kappa: float, K: float) -> bool:
    return kappa <= 1.0 - K
