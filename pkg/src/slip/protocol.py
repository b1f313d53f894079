"""Two-party hybrid inference as message-driven state machines.

Each party exposes ``handle(message) -> [replies]``.  The in-memory driver in
this module and the socket runtime in :mod:`slip.transport` both just shuttle
messages between the two, so a given seed yields the same frames either way.

Charlie owns the hidden factors, the one-time pads and every nonlinearity of a
split layer.  David owns the dense residuals and runs offloaded layers on his
own.  Each pad is keyed by ``(inference_id, layer_index, path)`` and is popped
from the pool when used, so it can never be applied twice.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ring
from .errors import MaskExhaustedError, ProtocolError, ShapeError, TopologyMismatch
from .models import (
    ModelParams,
    apply_activation,
    attention_mix,
    check_product_fits,
    combine,
    exact_product,
    max_row_l1,
)

PROTOCOL_VERSION = 1
C2D = "C->D"
D2C = "D->C"
# auto-replenishment never draws pads for more inferences than this in one go,
# so a stray inference id cannot make Charlie precompute without bound
MAX_REPLENISH_AHEAD = 1024


class Path(enum.IntEnum):
    main = 0
    q = 1
    k = 2
    v = 3


ATTENTION_PATHS = (Path.q, Path.k, Path.v)


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class LayerSpec:
    rows: int
    cols: int
    split: bool
    activation: str


@dataclass(frozen=True)
class Topology:
    kind: str
    layers: tuple

    def __len__(self):
        return len(self.layers)

    @property
    def d_h(self):
        return self.layers[0].rows if self.kind == "attention_head" else None

    def path_of(self, index: int) -> Path:
        if self.kind == "attention_head" and index < 3:
            return ATTENTION_PATHS[index]
        return Path.main

    def masked_keys(self):
        """``(layer_index, path)`` for every exchange that needs a pad."""
        return [(i, self.path_of(i)) for i, spec in enumerate(self.layers) if spec.split]


@dataclass(frozen=True)
class SetupParams:
    ring: ring.RingParams
    topology: Topology
    version: int = PROTOCOL_VERSION
    inference_id: int = 0


@dataclass(frozen=True)
class InferenceInput:
    inference_id: int
    vec: ring.FixedVec


@dataclass(frozen=True)
class MaskedActivation:
    inference_id: int
    layer_id: int
    path: Path
    vec: ring.FixedVec


@dataclass(frozen=True)
class MaskedPartial:
    inference_id: int
    layer_id: int
    path: Path
    vec: ring.FixedVec


@dataclass(frozen=True)
class PlainActivation:
    inference_id: int
    layer_id: int
    vec: ring.FixedVec


@dataclass(frozen=True)
class InferenceOutput:
    inference_id: int
    vec: ring.FixedVec


@dataclass(frozen=True)
class Abort:
    inference_id: int
    reason: int = 0


ProtocolMessage = (SetupParams, InferenceInput, MaskedActivation, MaskedPartial, PlainActivation, InferenceOutput, Abort)


@dataclass
class Transcript:
    inference_id: int | None = None
    entries: list = field(default_factory=list)

    def append(self, direction, msg):
        self.entries.append((direction, msg))

    def schedule(self):
        """Frame types in order, with layer and path where present."""
        out = []
        for direction, msg in self.entries:
            item = (direction, type(msg).__name__)
            if hasattr(msg, "layer_id"):
                item += (msg.layer_id,)
            if hasattr(msg, "path"):
                item += (Path(msg.path).name,)
            out.append(item)
        return out

    def of_type(self, cls):
        return [msg for _, msg in self.entries if isinstance(msg, cls)]


@dataclass
class OpCounter:
    """Multiply-adds of matrix products and elementwise ops, one per element."""

    macs: int = 0
    elementwise: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise

    @property
    def total_ops(self) -> int:
        return self.macs + self.elementwise

    def reset(self):
        self.macs = self.elementwise = 0


# ---------------------------------------------------------------- party state


@dataclass
class CharlieLayer:
    factors: object  # Decomposition or None
    w_d_int: np.ndarray
    row_l1: int
    bias: np.ndarray | None
    activation: str


@dataclass
class DavidLayer:
    w_int: np.ndarray
    row_l1: int
    bias: np.ndarray | None = None
    activation: str = "identity"


def _rows(vec: ring.FixedVec) -> int:
    return 1 if vec.values.ndim == 1 else vec.values.shape[0]


def _reshape(vec: ring.FixedVec, width: int, kind: str) -> ring.FixedVec:
    if kind != "attention_head":
        return vec
    if vec.values.size % width:
        raise ShapeError(f"payload of {vec.values.size} values is not a multiple of {width}")
    return ring.FixedVec(vec.values.reshape(-1, width), vec.modulus, vec.logical_scale)


@dataclass
class _Context:
    inference_id: int
    x: ring.FixedVec | None = None
    pending: dict = field(default_factory=dict)
    partial: dict = field(default_factory=dict)


class CharlieState:
    """Trusted party: hidden factors, pad pools, activations of split layers."""

    def __init__(self, ring_params, topology, layers, stream, secure=True, tokens=1, auto_replenish=False):
        self.ring = ring_params
        self.topology = topology
        self.split_layers = layers
        self.stream = stream
        self.secure = secure
        self.tokens = tokens
        self.auto_replenish = auto_replenish
        self.mask_pool = {}
        self.cancel_pool = {}
        self.next_inference_id = 0
        self.burned = set()
        self.outputs = {}
        self.counter = OpCounter()
        self.offline_counter = OpCounter()
        self._ctx = None

    # -- precomputation ----------------------------------------------------

    def _mask_shape(self, i):
        cols = self.topology.layers[i].cols
        return (self.tokens, cols) if self.topology.kind == "attention_head" else (cols,)

    def precompute(self, inference_budget: int):
        """Draw fresh pads and their cancellation masks for the next
        ``inference_budget`` inference ids."""
        for _ in range(inference_budget):
            iid = self.next_inference_id
            for i, path in self.topology.masked_keys():
                layer = self.split_layers[i]
                r = ring.sample_mask(self._mask_shape(i), self.ring, self.stream)
                c = ring.cancellation_mask(layer.w_d_int, r, i)
                self.mask_pool[(iid, i, path)] = r
                self.cancel_pool[(iid, i, path)] = c
                self.offline_counter.macs += r.values.size // self.topology.layers[i].cols * layer.w_d_int.size
            self.next_inference_id += 1
        return self

    def pool_size(self, layer_id=None):
        return sum(1 for key in self.mask_pool if layer_id is None or key[1] == layer_id)

    def abort(self, inference_id):
        """Burn every pad of ``inference_id`` so it can never be used again."""
        for key in [k for k in self.mask_pool if k[0] == inference_id]:
            del self.mask_pool[key]
            del self.cancel_pool[key]
        self.burned.add(inference_id)
        if self._ctx is not None and self._ctx.inference_id == inference_id:
            self._ctx = None

    def _require_pads(self, iid):
        if iid in self.burned or iid in self.outputs:
            raise MaskExhaustedError(f"inference {iid} was already run or aborted; its pads are gone")
        if not self.secure:
            return
        keys = [(iid, i, p) for i, p in self.topology.masked_keys()]
        ahead = iid - self.next_inference_id + 1
        if not all(k in self.mask_pool for k in keys) and self.auto_replenish and 0 < ahead <= MAX_REPLENISH_AHEAD:
            self.precompute(ahead)
        missing = [k for k in keys if k not in self.mask_pool]
        if missing:
            raise MaskExhaustedError(f"no unused pad for {missing[0]}")

    # -- single exchange ---------------------------------------------------

    def open_exchange(self, iid, i, a: ring.FixedVec, secure=None) -> MaskedActivation:
        """Mask layer ``i``'s input and remember what is needed to finish it."""
        secure = self.secure if secure is None else secure
        layer = self.split_layers.get(i)
        if layer is None:
            raise TopologyMismatch(f"layer {i} is not split")
        path = self.topology.path_of(i)
        check_product_fits(layer.row_l1, a.centered(), self.ring)
        rows = _rows(a)
        c = None
        if secure:
            key = (iid, i, path)
            try:
                r = self.mask_pool.pop(key)
                c = self.cancel_pool.pop(key)
            except KeyError:
                raise MaskExhaustedError(f"no unused pad for {key}") from None
            if a.values.ndim == 2:
                r = ring.MaskVec(r.values[:rows], r.modulus, r.seed_id)
                c = ring.CancellationMask(c.values[:rows], c.modulus, c.layer_index)
            sent = ring.mask(a, r)
            self.counter.elementwise += a.values.size
        else:
            sent = a
        self._pending_slot()[(i, path)] = (a, c)
        return MaskedActivation(iid, i, path, sent)

    def close_exchange(self, msg: MaskedPartial):
        """Unmask David's reply and return the float pre-activation."""
        key = (msg.layer_id, Path(msg.path))
        try:
            a_prev, c = self._pending_slot().pop(key)
        except KeyError:
            raise ProtocolError(f"unexpected partial for layer {msg.layer_id} path {key[1].name}") from None
        layer = self.split_layers[msg.layer_id]
        reply = _reshape(msg.vec, self.topology.layers[msg.layer_id].rows, self.topology.kind)
        if reply.values.shape[:-1] != a_prev.values.shape[:-1] or reply.values.shape[-1] != layer.w_d_int.shape[0]:
            raise ShapeError("partial product has the wrong shape")
        if c is not None:
            acc = ring.unmask(reply, c, self.ring).centered()
            self.counter.elementwise += reply.values.size
        else:
            acc = reply.centered()
        if layer.factors is not None:
            k = layer.factors.k
            m, n = layer.w_d_int.shape
            self.counter.macs += _rows(a_prev) * k * (m + n)
        return combine(acc, a_prev, layer.factors, layer.bias, self.ring)

    def _pending_slot(self):
        if self._ctx is None:
            self._ctx = _Context(-1)
        return self._ctx.pending

    # -- message handling --------------------------------------------------

    def handle(self, msg):
        if isinstance(msg, InferenceInput):
            return self._on_input(msg)
        if isinstance(msg, PlainActivation):
            return self._on_plain(msg)
        if isinstance(msg, MaskedPartial):
            return self._on_partial(msg)
        if isinstance(msg, InferenceOutput):
            self.outputs[msg.inference_id] = _reshape(msg.vec, self.topology.layers[-1].rows, self.topology.kind)
            self._ctx = None
            return []
        if isinstance(msg, Abort):
            self.abort(msg.inference_id)
            return []
        raise ProtocolError(f"Charlie cannot handle {type(msg).__name__}")

    def _check_ctx(self, iid):
        if self._ctx is None or self._ctx.inference_id != iid:
            raise ProtocolError(f"no inference {iid} in progress")
        return self._ctx

    def _on_input(self, msg):
        iid = msg.inference_id
        if self._ctx is not None and self._ctx.inference_id != -1:
            raise ProtocolError("an inference is already in progress")
        self._require_pads(iid)
        x = _reshape(msg.vec, self.topology.layers[0].cols, self.topology.kind)
        self._ctx = _Context(iid, x)
        if self.topology.kind == "attention_head":
            return [self.open_exchange(iid, 0, x), self.open_exchange(iid, 1, x)]
        if self.topology.layers[0].split:
            return [self.open_exchange(iid, 0, x)]
        return []

    def _on_plain(self, msg):
        ctx = self._check_ctx(msg.inference_id)
        nxt = msg.layer_id + 1
        if nxt >= len(self.topology) or not self.topology.layers[nxt].split:
            raise TopologyMismatch(f"plain activation after layer {msg.layer_id} does not precede a split layer")
        a = _reshape(msg.vec, self.topology.layers[msg.layer_id].rows, self.topology.kind)
        return [self.open_exchange(ctx.inference_id, nxt, a)]

    def _on_partial(self, msg):
        ctx = self._check_ctx(msg.inference_id)
        i = msg.layer_id
        z = self.close_exchange(msg)
        if self.topology.kind == "attention_head" and i < 2:
            ctx.partial[i] = z
            if len(ctx.partial) < 2:
                return []
            Q, K = ctx.partial[0], ctx.partial[1]
            t = Q.shape[0]
            self.counter.macs += t * t * (self.topology.d_h + self.topology.layers[0].cols)
            self.counter.elementwise += t * t
            mixed = ring.quantize(attention_mix(Q, K, ctx.x, self.topology.d_h, self.ring), self.ring)
            return [self.open_exchange(ctx.inference_id, 2, mixed)]
        a = ring.quantize(apply_activation(z, self.split_layers[i].activation), self.ring)
        self.counter.elementwise += a.values.size
        return self._after_layer(ctx, i, a)

    def _after_layer(self, ctx, i, a):
        if i == len(self.topology) - 1:
            self.outputs[ctx.inference_id] = a
            self._ctx = None
            return [InferenceOutput(ctx.inference_id, a)]
        if self.topology.layers[i + 1].split:
            return [self.open_exchange(ctx.inference_id, i + 1, a)]
        return [PlainActivation(ctx.inference_id, i, a)]


class DavidState:
    """Untrusted party: residual weights of split layers, whole offloaded layers."""

    def __init__(self, ring_params, topology, split_layers, offloaded_layers, session_id=0):
        self.ring = ring_params
        self.topology = topology
        self.split_layers = split_layers
        self.offloaded_layers = offloaded_layers
        self.session_id = session_id
        self.next_inference_id = 0
        self.outputs = {}
        self.counter = OpCounter()

    def start(self, x, inference_id=None):
        """Messages that open an inference on input ``x`` (floats or a FixedVec)."""
        if inference_id is None:
            inference_id = self.next_inference_id
        self.next_inference_id = max(self.next_inference_id, inference_id + 1)
        if not isinstance(x, ring.FixedVec):
            x = ring.quantize(x, self.ring)
        if x.values.shape[-1] != self.topology.layers[0].cols:
            raise ShapeError(f"input width {x.values.shape[-1]} != {self.topology.layers[0].cols}")
        msgs = [InferenceInput(inference_id, x)]
        if self.topology.kind != "attention_head" and not self.topology.layers[0].split:
            msgs += self._run_local(inference_id, -1, x)
        return msgs

    def handle(self, msg):
        if isinstance(msg, MaskedActivation):
            W = self.split_layers.get(msg.layer_id)
            if W is None:
                raise TopologyMismatch(f"David holds no residual for layer {msg.layer_id}")
            vec = _reshape(msg.vec, self.topology.layers[msg.layer_id].cols, self.topology.kind)
            reply = ring.modmatvec(W, vec, self.ring)
            self.counter.macs += _rows(vec) * W.size
            return [MaskedPartial(msg.inference_id, msg.layer_id, msg.path, reply)]
        if isinstance(msg, PlainActivation):
            a = _reshape(msg.vec, self.topology.layers[msg.layer_id].rows, self.topology.kind)
            return self._run_local(msg.inference_id, msg.layer_id, a)
        if isinstance(msg, InferenceOutput):
            self.outputs[msg.inference_id] = _reshape(msg.vec, self.topology.layers[-1].rows, self.topology.kind)
            return []
        if isinstance(msg, Abort):
            return []
        raise ProtocolError(f"David cannot handle {type(msg).__name__}")

    def _run_local(self, iid, done, a):
        j = done + 1
        while j < len(self.topology) and not self.topology.layers[j].split:
            layer = self.offloaded_layers[j]
            acc = exact_product(layer.w_int, a, self.ring, layer.row_l1)
            z = combine(acc, a, None, layer.bias, self.ring)
            a = ring.quantize(apply_activation(z, layer.activation), self.ring)
            self.counter.macs += _rows(a) * layer.w_int.size
            self.counter.elementwise += a.values.size
            j += 1
        if j == len(self.topology):
            self.outputs[iid] = a
            return [InferenceOutput(iid, a)]
        return [PlainActivation(iid, j - 1, a)]


# ---------------------------------------------------------------- construction


def build_parties(model: ModelParams, decompositions, params: ring.RingParams, seed=0, *,
                  budget=0, secure=True, tokens=None, session_id=0, stream_label=None,
                  max_abs_activation=None, auto_replenish=False):
    """Quantize a decomposed model into a Charlie and a David state.

    Both sides get their integer residual from the same ``quantize_matrix``
    call, which is what makes Charlie's cancellation masks match David's
    products exactly.  With ``max_abs_activation`` the ring headroom is
    checked here, once, from the row norms.
    """
    decompositions = decompositions or {}
    attention = model.kind == "attention_head"
    specs, c_layers, d_split, d_off = [], {}, {}, {}
    for i, layer in enumerate(model.layers):
        dec = decompositions.get(i)
        masked = dec is not None or (attention and i < 3)
        m, n = layer.shape
        specs.append(LayerSpec(m, n, masked, layer.activation))
        if masked:
            w_d = ring.quantize_matrix(dec.david_part if dec is not None else layer.weight, params)
            l1 = max_row_l1(w_d)
            if max_abs_activation is not None and not params.check_headroom(max_abs_activation, l1 / params.scale):
                raise OverflowError(f"layer {i}: ring headroom too small for |a| <= {max_abs_activation}")
            c_layers[i] = CharlieLayer(dec, w_d, l1, layer.bias, layer.activation)
            d_split[i] = w_d
        else:
            w = ring.quantize_matrix(layer.weight, params)
            d_off[i] = DavidLayer(w, max_row_l1(w), layer.bias, layer.activation)
    topology = Topology(model.kind, tuple(specs))
    label = stream_label if stream_label is not None else f"session-{session_id}"
    charlie = CharlieState(params, topology, c_layers, ring.CSPRNG(seed, label), secure=secure,
                           tokens=tokens or 1, auto_replenish=auto_replenish)
    if budget:
        charlie.precompute(budget)
    david = DavidState(params, topology, d_split, d_off, session_id=session_id)
    return charlie, david


def precompute(charlie: CharlieState, inference_budget: int) -> CharlieState:
    return charlie.precompute(inference_budget)


# ---------------------------------------------------------------- in-memory runs


def exchange(charlie, david, opening, transcript=None):
    """Deliver messages until both parties go quiet.

    Replies are delivered depth first, which is the order a David reading
    one frame at a time off a socket sees them in.
    """
    stack = [iter([(D2C, m) for m in opening])]
    while stack:
        item = next(stack[-1], None)
        if item is None:
            stack.pop()
            continue
        direction, msg = item
        if transcript is not None:
            transcript.append(direction, msg)
        if direction == D2C:
            stack.append(iter([(C2D, r) for r in charlie.handle(msg)]))
        else:
            stack.append(iter([(D2C, r) for r in david.handle(msg)]))


def _run(charlie, david, x, inference_id, transcript):
    opening = david.start(x, inference_id)
    iid = opening[0].inference_id
    if transcript is not None:
        transcript.inference_id = iid
    exchange(charlie, david, opening, transcript)
    out_c, out_d = charlie.outputs.get(iid), david.outputs.get(iid)
    if out_c is None or out_d is None or out_c != out_d:
        raise ProtocolError(f"inference {iid} ended without both parties holding the same output")
    return out_d


def run_mlp_hybrid(charlie, david, x, inference_id=None, transcript=None) -> ring.FixedVec:
    """Run one inference end to end; both parties finish holding the output."""
    if charlie.topology != david.topology or charlie.topology.kind == "attention_head":
        raise TopologyMismatch("parties disagree on the topology or the model is not an MLP")
    return _run(charlie, david, x, inference_id, transcript)


def run_attention_hybrid(charlie, david, X, inference_id=None, transcript=None) -> ring.FixedVec:
    """Double-step attention inference: masked q/k, softmax mixing on Charlie,
    masked v, then the output projection."""
    if charlie.topology != david.topology or charlie.topology.kind != "attention_head":
        raise TopologyMismatch("parties disagree on the topology or the model is not an attention head")
    X = np.asarray(X) if not isinstance(X, ring.FixedVec) else X
    rows = X.values.shape[0] if isinstance(X, ring.FixedVec) else X.shape[0]
    if rows > charlie.tokens:
        raise ShapeError(f"{rows} tokens exceed the {charlie.tokens} the pads were drawn for")
    return _run(charlie, david, X, inference_id, transcript)


def _layer_step(charlie, david, a_prev, layer_id, inference_id, secure, transcript):
    if not isinstance(a_prev, ring.FixedVec):
        a_prev = ring.quantize(a_prev, charlie.ring)
    if inference_id is None:
        ids = sorted(k[0] for k in charlie.mask_pool if k[1] == layer_id)
        inference_id = ids[0] if (ids and secure) else 0
    saved, charlie._ctx = charlie._ctx, _Context(inference_id)
    try:
        sent = charlie.open_exchange(inference_id, layer_id, a_prev, secure=secure)
        (reply,) = david.handle(sent)
        if transcript is not None:
            transcript.append(C2D, sent)
            transcript.append(D2C, reply)
        z = charlie.close_exchange(reply)
    finally:
        charlie._ctx = saved
    return ring.quantize(apply_activation(z, charlie.split_layers[layer_id].activation), charlie.ring)


def secure_layer_step(charlie, david, a_prev, layer_id, inference_id=None, transcript=None) -> ring.FixedVec:
    """One masked layer: pad, David's product, unmask, Charlie's part, activation."""
    return _layer_step(charlie, david, a_prev, layer_id, inference_id, True, transcript)


def insecure_layer_step(charlie, david, a_prev, layer_id, transcript=None) -> ring.FixedVec:
    """The same layer with the plaintext input sent to David."""
    return _layer_step(charlie, david, a_prev, layer_id, 0, False, transcript)
