"""Toy models, their monolithic reference passes, and the checkpoint container.

The quantized reference runs exactly the arithmetic the two-party protocol
runs, only on one machine and without masks, so the protocol can be checked
against it bit for bit.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ring
from .errors import MalformedFrame, ShapeError

ACTIVATIONS = ("relu", "softmax", "identity")
KINDS = ("mlp", "attention_head", "conv")


class LayerType(str, enum.Enum):
    mlp_fc = "mlp_fc"
    mlp_proj = "mlp_proj"
    attn_q = "attn_q"
    attn_k = "attn_k"
    attn_v = "attn_v"
    attn_o = "attn_o"
    generic = "generic"


ATTENTION_TYPES = (LayerType.attn_q, LayerType.attn_k, LayerType.attn_v, LayerType.attn_o)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = "identity"
    block: int = 0
    layer_type: LayerType = LayerType.generic

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ShapeError(f"weight must be a non-empty matrix, got shape {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise ShapeError("weight has non-finite entries")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.layer_type = LayerType(self.layer_type)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def layer_id(self):
        return (self.block, self.layer_type.value)


@dataclass
class ModelParams:
    layers: list
    kind: str = "mlp"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        if self.kind == "attention_head":
            types = tuple(layer.layer_type for layer in self.layers)
            if types != ATTENTION_TYPES:
                raise ShapeError("attention head needs exactly (attn_q, attn_k, attn_v, attn_o)")
            q, k, v, o = (layer.weight for layer in self.layers)
            if not (q.shape == k.shape == v.shape and o.shape == (q.shape[1], q.shape[0])):
                raise ShapeError("W_q, W_k, W_v must be d_h x d and W_o d x d_h")
            if any(l.bias is not None or l.activation != "identity" for l in self.layers[:3]):
                raise ShapeError("q, k, v projections take no bias and no activation")
        else:
            for prev, nxt in zip(self.layers, self.layers[1:]):
                if prev.shape[0] != nxt.shape[1]:
                    raise ShapeError(f"layer output {prev.shape[0]} does not feed input {nxt.shape[1]}")

    @property
    def d_h(self):
        return self.layers[0].shape[0] if self.kind == "attention_head" else None

    @property
    def input_dim(self):
        return self.layers[0].shape[1]

    def index_of(self, block, layer_type):
        layer_type = LayerType(layer_type)
        for i, layer in enumerate(self.layers):
            if layer.block == block and layer.layer_type == layer_type:
                return i
        return None

    @property
    def n_params(self):
        return sum(layer.weight.size for layer in self.layers)


@dataclass(frozen=True)
class ConvSpec:
    H: int
    W: int
    C: int
    kH: int
    kW: int
    N: int

    def __post_init__(self):
        if min(self.H, self.W, self.C, self.kH, self.kW, self.N) < 1:
            raise ShapeError("all conv dimensions must be positive")
        if self.kH > self.H or self.kW > self.W:
            raise ShapeError("kernel larger than input")

    @property
    def out_hw(self):
        return self.H - self.kH + 1, self.W - self.kW + 1


# ---------------------------------------------------------------- activations


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def apply_activation(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax(z)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------- float reference


def attention_float(X, Wq, Wk, Wv, Wo):
    Q, K, V = X @ Wq.T, X @ Wk.T, X @ Wv.T
    A = softmax(Q @ K.T / np.sqrt(Wq.shape[0]))
    return (A @ V) @ Wo.T


def forward_reference(model: ModelParams, x):
    """Monolithic float64 forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if model.kind == "attention_head":
        if x.ndim != 2 or x.shape[1] != model.input_dim:
            raise ShapeError(f"attention input must be tokens x {model.input_dim}")
        q, k, v, o = model.layers
        out = attention_float(x, q.weight, k.weight, v.weight, o.weight)
        return apply_activation(out + (o.bias if o.bias is not None else 0.0), o.activation)
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"input length {x.shape[-1]} != {model.input_dim}")
    a = x
    for layer in model.layers:
        z = a @ layer.weight.T
        if layer.bias is not None:
            z = z + layer.bias
        a = apply_activation(z, layer.activation)
    return a


# ---------------------------------------------------------------- quantized path
# Every function below is shared by the local oracle and the protocol parties.


def max_row_l1(W_int) -> int:
    W = np.asarray(W_int, dtype=np.int64)
    return int(np.max(np.sum(np.abs(W), axis=1))) if W.size else 0


def check_product_fits(row_l1: int, a_signed, params: ring.RingParams):
    """Runtime headroom guard: ``|W a|_inf <= row_l1 * |a|_inf < L/2``."""
    amax = int(np.max(np.abs(a_signed))) if np.size(a_signed) else 0
    if row_l1 * amax >= params.modulus // 2:
        raise OverflowError(
            f"|W a| may reach {row_l1 * amax:.3e}, which does not fit L/2 = {params.modulus // 2:.3e}"
        )


def exact_product(W_int, a: ring.FixedVec, params: ring.RingParams, row_l1=None) -> np.ndarray:
    """Signed integer ``W_int @ a`` at logical scale 2."""
    check_product_fits(max_row_l1(W_int) if row_l1 is None else row_l1, a.centered(), params)
    return ring.modmatvec(W_int, a, params).centered()


def combine(acc_int, a_prev: ring.FixedVec, factors, bias, params: ring.RingParams):
    """Pre-activation ``W_D a (exact) + W_C a (factored, float) + bias``."""
    s = float(params.scale)
    z = np.asarray(acc_int, dtype=np.float64) / (s * s)
    if factors is not None:
        z = z + factors.apply(a_prev.centered().astype(np.float64) / s)
    if bias is not None:
        z = z + bias
    return z


def attention_mix(Q, K, X_fixed: ring.FixedVec, d_h: int, params: ring.RingParams) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d_h)) @ X``; the value projection is applied afterwards."""
    A = softmax(Q @ K.T / np.sqrt(d_h))
    return A @ (X_fixed.centered().astype(np.float64) / params.scale)


def _split_or_full(model, decompositions, params, i):
    dec = decompositions.get(i) if decompositions else None
    if dec is None:
        return ring.quantize_matrix(model.layers[i].weight, params), None
    return ring.quantize_matrix(dec.david_part, params), dec


def quantized_layer(model, decompositions, params, i, a: ring.FixedVec, activation=True):
    W_int, dec = _split_or_full(model, decompositions, params, i)
    layer = model.layers[i]
    acc = exact_product(W_int, a, params)
    z = combine(acc, a, dec, layer.bias, params)
    return apply_activation(z, layer.activation) if activation else z


def forward_reference_quantized(model: ModelParams, x, params: ring.RingParams, decompositions=None) -> ring.FixedVec:
    """Quantize, multiply in the ring, dequantize, activate and re-quantize,
    layer by layer, with no masking.

    ``decompositions`` maps a layer index to its split; those layers use the
    quantized residual plus the float factored part exactly as Charlie and
    David do.  Unlisted layers use the whole quantized weight.
    """
    a = ring.quantize(x, params)
    if model.kind == "attention_head":
        if a.values.ndim != 2:
            raise ShapeError("attention input must be a tokens x d matrix")
        Q = quantized_layer(model, decompositions, params, 0, a, activation=False)
        K = quantized_layer(model, decompositions, params, 1, a, activation=False)
        mixed = ring.quantize(attention_mix(Q, K, a, model.d_h, params), params)
        v = ring.quantize(quantized_layer(model, decompositions, params, 2, mixed), params)
        return ring.quantize(quantized_layer(model, decompositions, params, 3, v), params)
    for i in range(len(model.layers)):
        a = ring.quantize(quantized_layer(model, decompositions, params, i, a), params)
    return a


# ---------------------------------------------------------------- convolution


def conv_to_fc(spec: ConvSpec, kernel) -> np.ndarray:
    """Dense ``(Ho*Wo*N, H*W*C)`` matrix equal to a stride-1, unpadded convolution.

    Both input and output are flattened row-major over (row, col, channel).
    """
    K = np.asarray(kernel, dtype=np.float64)
    if K.shape != (spec.kH, spec.kW, spec.C, spec.N):
        raise ShapeError(f"kernel shape {K.shape} != {(spec.kH, spec.kW, spec.C, spec.N)}")
    Ho, Wo = spec.out_hw
    W = np.zeros((Ho * Wo * spec.N, spec.H * spec.W * spec.C))
    i, j, u, v, c, n = np.meshgrid(
        np.arange(Ho), np.arange(Wo), np.arange(spec.kH), np.arange(spec.kW),
        np.arange(spec.C), np.arange(spec.N), indexing="ij",
    )
    rows = (i * Wo + j) * spec.N + n
    cols = ((i + u) * spec.W + (j + v)) * spec.C + c
    W[rows.ravel(), cols.ravel()] = K[u.ravel(), v.ravel(), c.ravel(), n.ravel()]
    return W


def conv_layer(spec: ConvSpec, kernel, bias=None, activation="identity") -> Layer:
    return Layer(conv_to_fc(spec, kernel), bias, activation)


# ---------------------------------------------------------------- toy models


def toy_mlp(dims=(16, 32, 32, 8), activations=None, seed=0, bias=True, gain=1.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    n_layers = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    layers = []
    for i, (n, m) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, gain / np.sqrt(n), size=(m, n))
        b = rng.normal(0.0, 0.1, size=m) if bias else None
        layers.append(Layer(w, b, activations[i], block=i))
    return ModelParams(layers, "mlp")


def toy_attention(d=8, d_h=8, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    layers = [
        Layer(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d_h, d)), layer_type=t)
        for t in (LayerType.attn_q, LayerType.attn_k, LayerType.attn_v)
    ]
    layers.append(Layer(rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d, d_h)), layer_type=LayerType.attn_o))
    return ModelParams(layers, "attention_head")


def toy_transformer(blocks=12, d=256, hidden=1024, seed=0) -> ModelParams:
    """Decoder-shaped stack treated as a plain feed-forward chain.

    Each block contributes q, k, v, o projections (d x d) and an MLP pair
    (d -> hidden -> d).  There is no token mixing; the shape exists for
    offload accounting and split planning.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for b in range(blocks):
        for t in ATTENTION_TYPES:
            layers.append(Layer(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)), block=b, layer_type=t))
        layers.append(Layer(rng.normal(0.0, np.sqrt(2.0 / d), size=(hidden, d)), activation="relu",
                            block=b, layer_type=LayerType.mlp_fc))
        layers.append(Layer(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d, hidden)),
                            block=b, layer_type=LayerType.mlp_proj))
    return ModelParams(layers, "mlp")


# ---------------------------------------------------------------- SLPM container
#
#   magic "SLPM" | version u16 | count u32 | records...
#   record: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u64[rank] | payload (LE)

SLPM_MAGIC = b"SLPM"
SLPM_VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<u8", 4: "u1"}
_DTYPE_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}
_DTYPE_CODES[np.dtype("|u1").str] = 4


def save_tensors(path_or_file, tensors: dict):
    buf = io.BytesIO()
    buf.write(SLPM_MAGIC + struct.pack("<HI", SLPM_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4")
        elif arr.dtype.kind == "i":
            arr = arr.astype("<i8")
        elif arr.dtype.kind == "u" and arr.dtype.itemsize > 1:
            arr = arr.astype("<u8")
        code = _DTYPE_CODES.get(arr.dtype.str)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_tensors(path_or_bytes) -> dict:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    view = memoryview(data)
    try:
        if data[:4] != SLPM_MAGIC:
            raise MalformedFrame("not an SLPM container")
        version, count = struct.unpack_from("<HI", data, 4)
        if version != SLPM_VERSION:
            raise MalformedFrame(f"unsupported SLPM version {version}")
        pos, out = 10, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dtype = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise MalformedFrame(f"tensor {name!r} is truncated")
            out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise MalformedFrame(f"corrupt SLPM container: {exc}") from exc
    return out


def json_tensor(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def tensor_json(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode())


def model_to_tensors(model: ModelParams) -> dict:
    meta = {
        "kind": model.kind,
        "layers": [
            {"activation": l.activation, "block": l.block, "layer_type": l.layer_type.value, "bias": l.bias is not None}
            for l in model.layers
        ],
    }
    tensors = {"__meta__": json_tensor(meta)}
    for i, layer in enumerate(model.layers):
        tensors[f"layers.{i}.weight"] = layer.weight
        if layer.bias is not None:
            tensors[f"layers.{i}.bias"] = layer.bias
    return tensors


def model_from_tensors(tensors: dict) -> ModelParams:
    meta = tensor_json(tensors["__meta__"])
    layers = []
    for i, info in enumerate(meta["layers"]):
        layers.append(Layer(
            tensors[f"layers.{i}.weight"],
            tensors.get(f"layers.{i}.bias") if info["bias"] else None,
            info["activation"], info["block"], info["layer_type"],
        ))
    return ModelParams(layers, meta["kind"])


def save_model(path, model: ModelParams):
    save_tensors(path, model_to_tensors(model))


def load_model(path) -> ModelParams:
    return model_from_tensors(load_tensors(path))
