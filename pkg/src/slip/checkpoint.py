"""Per-party checkpoint files.

``charlie.bin`` holds the hidden factors of every split layer, the float
residual needed for cancellation masks, and the split layers' biases.
``david.bin`` holds the residuals of split layers and every offloaded layer
in full.  Both use the SLPM tensor container and carry the same layer
metadata, so either side can rebuild the topology on its own.
"""

from __future__ import annotations

import numpy as np

from . import protocol as P
from . import ring
from .decompose import Decomposition
from .errors import MalformedFrame
from .models import Layer, ModelParams, json_tensor, load_tensors, max_row_l1, save_tensors, tensor_json


def _meta(model: ModelParams, decompositions, role):
    return {
        "role": role,
        "kind": model.kind,
        "layers": [
            {
                "rows": l.shape[0],
                "cols": l.shape[1],
                "activation": l.activation,
                "block": l.block,
                "layer_type": l.layer_type.value,
                "bias": l.bias is not None,
                "split": i in decompositions,
                "k": decompositions[i].k if i in decompositions else 0,
            }
            for i, l in enumerate(model.layers)
        ],
    }


def save_split(model: ModelParams, decompositions, charlie_path, david_path):
    """Write the two party files for a decomposed model."""
    decompositions = decompositions or {}
    c = {"__meta__": json_tensor(_meta(model, decompositions, "charlie"))}
    d = {"__meta__": json_tensor(_meta(model, decompositions, "david"))}
    for i, layer in enumerate(model.layers):
        dec = decompositions.get(i)
        if dec is not None:
            c[f"layers.{i}.U"], c[f"layers.{i}.S"], c[f"layers.{i}.V"] = dec.U, dec.S, dec.V
            c[f"layers.{i}.david_part"] = dec.david_part
            d[f"layers.{i}.david_part"] = dec.david_part
            if layer.bias is not None:
                c[f"layers.{i}.bias"] = layer.bias
        else:
            d[f"layers.{i}.weight"] = layer.weight
            if layer.bias is not None:
                d[f"layers.{i}.bias"] = layer.bias
            if model.kind == "attention_head" and i < 3:
                # masked even when unsplit, so Charlie needs it for cancellation
                c[f"layers.{i}.david_part"] = layer.weight
    save_tensors(charlie_path, c)
    save_tensors(david_path, d)


def _load(path, role):
    tensors = load_tensors(path)
    try:
        meta = tensor_json(tensors["__meta__"])
    except (KeyError, ValueError) as exc:
        raise MalformedFrame(f"{path}: missing or corrupt metadata") from exc
    if meta.get("role") != role:
        raise MalformedFrame(f"{path} is a {meta.get('role')} file, expected {role}")
    return meta, tensors


def _topology(meta):
    kind = meta["kind"]
    specs = []
    for i, info in enumerate(meta["layers"]):
        masked = info["split"] or (kind == "attention_head" and i < 3)
        specs.append(P.LayerSpec(info["rows"], info["cols"], masked, info["activation"]))
    return P.Topology(kind, tuple(specs))


def load_charlie_parts(path):
    """``(meta, {index: Decomposition}, {index: bias})`` from a Charlie file."""
    return _charlie_parts(*_load(path, "charlie"))


def _charlie_parts(meta, t):
    decs, biases = {}, {}
    for i, info in enumerate(meta["layers"]):
        if info["split"]:
            decs[i] = Decomposition(t[f"layers.{i}.U"], t[f"layers.{i}.S"], t[f"layers.{i}.V"],
                                    t[f"layers.{i}.david_part"], info["k"], (info["block"], info["layer_type"]))
        if info["bias"] and f"layers.{i}.bias" in t:
            biases[i] = t[f"layers.{i}.bias"]
    return meta, decs, biases


def load_charlie(path, params: ring.RingParams, seed=0, session_id=0, tokens=1, secure=True,
                 auto_replenish=True) -> P.CharlieState:
    meta, t = _load(path, "charlie")
    meta, decs, biases = _charlie_parts(meta, t)
    topology = _topology(meta)
    layers = {}
    for i, spec in enumerate(topology.layers):
        if spec.split:
            w_d = ring.quantize_matrix(t[f"layers.{i}.david_part"], params)
            layers[i] = P.CharlieLayer(decs.get(i), w_d, max_row_l1(w_d), biases.get(i), spec.activation)
    return P.CharlieState(params, topology, layers, ring.CSPRNG(seed, f"session-{session_id}"),
                          secure=secure, tokens=tokens, auto_replenish=auto_replenish)


def load_david(path, params: ring.RingParams, session_id=0) -> P.DavidState:
    meta, t = _load(path, "david")
    topology = _topology(meta)
    split_layers, offloaded = {}, {}
    for i, info in enumerate(meta["layers"]):
        if info["split"]:
            split_layers[i] = ring.quantize_matrix(t[f"layers.{i}.david_part"], params)
        elif topology.layers[i].split:
            split_layers[i] = ring.quantize_matrix(t[f"layers.{i}.weight"], params)
        else:
            w = ring.quantize_matrix(t[f"layers.{i}.weight"], params)
            offloaded[i] = P.DavidLayer(w, max_row_l1(w), t.get(f"layers.{i}.bias"), info["activation"])
    return P.DavidState(params, topology, split_layers, offloaded, session_id=session_id)


def reassemble(charlie_path, david_path):
    """The original model and its decompositions, rebuilt from both files."""
    meta, decs, biases = load_charlie_parts(charlie_path)
    dmeta, t = _load(david_path, "david")
    if dmeta["layers"] != meta["layers"] or dmeta["kind"] != meta["kind"]:
        raise MalformedFrame("charlie and david files describe different models")
    layers = []
    for i, info in enumerate(meta["layers"]):
        if info["split"]:
            weight = decs[i].reconstruct()
            bias = biases.get(i)
        else:
            weight = t[f"layers.{i}.weight"]
            bias = t.get(f"layers.{i}.bias")
        layers.append(Layer(weight, bias, info["activation"], info["block"], info["layer_type"]))
    return ModelParams(layers, meta["kind"]), decs


def densified(charlie_path, david_path) -> list:
    """Per-layer dense weights ``W_C + W_D`` (or ``W`` for offloaded layers)."""
    model, _ = reassemble(charlie_path, david_path)
    return [np.array(l.weight) for l in model.layers]
