"""Fixed-point arithmetic modulo a prime, one-time-pad masks and their removal.

Residues live in ``[0, L)`` as ``int64`` numpy arrays and are read as signed
integers through the centered lift ``[-L/2, L/2)``.  Weights are quantized to
small signed integers and are never reduced, so a matrix-vector product can be
formed exactly with int64 limbs and only the final combination needs Python
integers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .errors import DimensionMismatch

MERSENNE_61 = (1 << 61) - 1
DEFAULT_SCALE = 1 << 20

# residues must survive a + r without leaving int64
_MAX_MODULUS = 1 << 62
_LIMB_BITS = 21
_LIMB_MASK = (1 << _LIMB_BITS) - 1
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class RingParams:
    """Prime modulus and fixed-point scale shared by both parties.

    ``headroom_bits`` is the extra margin demanded by :meth:`check_headroom`
    on top of the bare ``|W a| < L/2`` requirement.
    """

    modulus: int = MERSENNE_61
    scale: int = DEFAULT_SCALE
    headroom_bits: int = 1

    def __post_init__(self):
        if not isinstance(self.modulus, int) or not 2 < self.modulus < _MAX_MODULUS:
            raise ValueError(f"modulus must be an int in (2, 2**62), got {self.modulus!r}")
        if not is_prime(self.modulus):
            raise ValueError(f"modulus {self.modulus} is not prime")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.headroom_bits < 0:
            raise ValueError("headroom_bits must be >= 0")

    @property
    def half(self) -> int:
        return self.modulus // 2

    def check_headroom(self, max_abs_activation: float, max_row_l1: float) -> bool:
        """True when ``scale**2 * |a|_inf * max_row_l1(W) * 2**headroom_bits < L/2``."""
        bound = float(self.scale) ** 2 * max_abs_activation * max_row_l1
        return bound * 2.0**self.headroom_bits < self.modulus / 2

    def max_scale_for(self, max_abs_activation: float, max_row_l1: float) -> int:
        """Largest power-of-two scale that passes :meth:`check_headroom`."""
        budget = self.modulus / 2 / 2.0**self.headroom_bits
        product = max(max_abs_activation * max_row_l1, 1e-300)
        return 1 << max(0, int(math.floor(0.5 * math.log2(budget / product))))


@dataclass(frozen=True, eq=False)
class FixedVec:
    """Residues mod ``modulus``.  ``logical_scale`` is 1 for activations and
    2 for raw matrix-vector accumulations."""

    values: np.ndarray
    modulus: int
    logical_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.int64))

    @property
    def shape(self):
        return self.values.shape

    def __len__(self):
        return self.values.size

    def centered(self) -> np.ndarray:
        return centered_lift(self.values, self.modulus)

    def __eq__(self, other):
        if not isinstance(other, FixedVec):
            return NotImplemented
        return (
            self.modulus == other.modulus
            and self.logical_scale == other.logical_scale
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self):
        return f"FixedVec({self.values.tolist()!r}, L={self.modulus}, scale^{self.logical_scale})"


@dataclass(frozen=True, eq=False)
class MaskVec:
    values: np.ndarray
    modulus: int
    seed_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class CancellationMask:
    values: np.ndarray
    modulus: int
    layer_index: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.int64))


def centered_lift(values, modulus: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    return np.where(v > modulus // 2, v - modulus, v)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, params: RingParams) -> FixedVec:
    """Map reals onto the fixed-point grid and into the ring.

    Raises ``OverflowError`` when a rounded value does not fit the centered
    range.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise OverflowError("non-finite value cannot be quantized")
    q = round_half_away(x * params.scale)
    if q.size and np.max(np.abs(q)) >= params.modulus / 2:
        raise OverflowError(
            f"|round(x*scale)| = {np.max(np.abs(q)):.3g} does not fit modulus {params.modulus}"
        )
    return FixedVec(np.mod(q.astype(np.int64), params.modulus), params.modulus, 1)


def dequantize(v: FixedVec, params: RingParams) -> np.ndarray:
    if v.logical_scale not in (1, 2):
        raise ValueError(f"logical_scale must be 1 or 2, got {v.logical_scale}")
    return v.centered().astype(np.float64) / float(params.scale) ** v.logical_scale


def quantize_matrix(W, params: RingParams) -> np.ndarray:
    """Signed integer weights ``round(W * scale)``; not reduced mod L."""
    q = round_half_away(np.asarray(W, dtype=np.float64) * params.scale)
    if q.size and np.max(np.abs(q)) >= 2.0**62:
        raise OverflowError("quantized weight does not fit int64")
    return q.astype(np.int64)


class CSPRNG:
    """ChaCha20 keystream with an explicit seed and byte position.

    Two generators built from the same ``(seed, stream)`` yield the same
    words; distinct streams are independent keys.
    """

    def __init__(self, seed, stream: str | int = 0):
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "little", signed=False)
        elif isinstance(seed, str):
            seed = seed.encode()
        self.label = str(stream)
        key = hashlib.sha256(b"slip/chacha20/" + bytes(seed) + b"/" + self.label.encode()).digest()
        cipher = Cipher(algorithms.ChaCha20(key, b"\x00" * 16), mode=None)
        self._enc = cipher.encryptor()
        self.position = 0

    def words(self, count: int) -> np.ndarray:
        data = self._enc.update(b"\x00" * (8 * count))
        self.position += 8 * count
        return np.frombuffer(data, dtype="<u8").copy()

    def uniform(self, count: int, modulus: int) -> np.ndarray:
        """``count`` residues uniform over ``[0, modulus)`` by rejection sampling."""
        bits = (modulus - 1).bit_length()
        mask = np.uint64((1 << bits) - 1)
        out = np.empty(0, dtype=np.int64)
        while out.size < count:
            need = count - out.size
            w = self.words(need + need // 2 + 8) & mask
            out = np.concatenate([out, w[w < np.uint64(modulus)].astype(np.int64)])
        return out[:count]


def sample_mask(dim, params: RingParams, stream: CSPRNG) -> MaskVec:
    """Fresh pad of shape ``dim``; ``seed_id`` names the stream position it came from."""
    shape = (dim,) if isinstance(dim, (int, np.integer)) else tuple(dim)
    size = int(np.prod(shape))
    if size < 1:
        raise ValueError("mask dimension must be >= 1")
    seed_id = f"{stream.label}@{stream.position}"
    vals = stream.uniform(size, params.modulus).reshape(shape)
    return MaskVec(vals, params.modulus, seed_id)


def _check_same(a_values, b_values, ma, mb):
    if ma != mb:
        raise DimensionMismatch(f"modulus mismatch: {ma} vs {mb}")
    if a_values.shape != b_values.shape:
        raise DimensionMismatch(f"shape mismatch: {a_values.shape} vs {b_values.shape}")


def mask(a: FixedVec, r: MaskVec) -> FixedVec:
    _check_same(a.values, r.values, a.modulus, r.modulus)
    return FixedVec(np.mod(a.values + r.values, a.modulus), a.modulus, a.logical_scale)


def unmask(a_tilde_d: FixedVec, c: CancellationMask, params: RingParams | None = None) -> FixedVec:
    """Remove the pad's image from David's reply; the centered lift of the
    result is the exact integer ``W_D @ a``."""
    _check_same(a_tilde_d.values, c.values, a_tilde_d.modulus, c.modulus)
    if params is not None and params.modulus != a_tilde_d.modulus:
        raise DimensionMismatch("ring parameters do not match the payload modulus")
    return FixedVec(np.mod(a_tilde_d.values - c.values, a_tilde_d.modulus), a_tilde_d.modulus, 2)


def _matvec_exact(W: np.ndarray, x: np.ndarray, modulus: int) -> np.ndarray:
    """``W @ x mod L`` with ``x`` residues; rows of a 2-D ``x`` are vectors."""
    n = W.shape[1]
    wmax = int(np.max(np.abs(W))) if W.size else 0
    if wmax * (1 << _LIMB_BITS) * max(n, 1) < (1 << 63):
        acc = np.zeros(x.shape[:-1] + (W.shape[0],), dtype=object)
        for j in range(3):
            limb = (x >> (_LIMB_BITS * j)) & _LIMB_MASK
            part = limb @ W.T
            acc = acc + part.astype(object) * (1 << (_LIMB_BITS * j))
        return np.mod(acc, modulus).astype(np.int64)
    acc = x.astype(object) @ W.T.astype(object)
    return np.mod(acc, modulus).astype(np.int64)


def modmatvec(W_int, x: FixedVec, params: RingParams | None = None) -> FixedVec:
    """``mod(W_int @ x, L)`` computed exactly.  A 2-D ``x`` holds one vector
    per row (tokens); the product is applied row-wise."""
    W = np.asarray(W_int)
    if W.dtype.kind not in "iu":
        raise TypeError("modmatvec needs an integer matrix")
    W = W.astype(np.int64)
    if W.ndim != 2 or W.shape[1] != x.values.shape[-1]:
        raise DimensionMismatch(f"matrix {W.shape} cannot act on vectors of length {x.values.shape[-1]}")
    modulus = x.modulus if params is None else params.modulus
    if modulus != x.modulus:
        raise DimensionMismatch("ring parameters do not match the vector modulus")
    return FixedVec(_matvec_exact(W, x.values, modulus), modulus, x.logical_scale + 1)


def cancellation_mask(W_int, r: MaskVec, layer_index: int) -> CancellationMask:
    out = modmatvec(W_int, FixedVec(r.values, r.modulus))
    return CancellationMask(out.values, r.modulus, layer_index)
