"""``slip`` command-line entry point.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.  All
randomness comes from ``--seed`` or, when that is absent, ``SLIP_SEED``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, costmodel, decompose, models, redteam, ring, transport
from . import protocol as P
from .errors import DegenerateError, SlipError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SLIP_SEED")
    if env is None:
        return 0
    try:
        return int(env, 0)
    except ValueError:
        raise UsageError(f"SLIP_SEED must be an integer, got {env!r}") from None


def _ring(args) -> ring.RingParams:
    return ring.RingParams(args.modulus, args.scale)


def _existing(path):
    if path is not None and not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return path


def _read_json(path):
    with open(_existing(path)) as fh:
        return json.load(fh)


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _input_array(path):
    data = _read_json(path)
    if isinstance(data, dict):
        data = data["input"]
    return np.asarray(data, dtype=np.float64)


def _output_json(vec: ring.FixedVec, params: ring.RingParams) -> str:
    return json.dumps({
        "modulus": params.modulus,
        "scale": params.scale,
        "residues": vec.values.tolist(),
        "output": ring.dequantize(vec, params).tolist(),
    }, sort_keys=True)


# ---------------------------------------------------------------- subcommands


TOY_PRESETS = {
    "toy-mlp": lambda seed: models.toy_mlp((16, 32, 32, 8), seed=seed),
    "toy-attn": lambda seed: models.toy_attention(8, 8, seed=seed),
    "toy-transformer": lambda seed: models.toy_transformer(12, 256, 1024, seed=seed),
}


def cmd_toy(args):
    model = TOY_PRESETS[args.preset](_seed(args))
    models.save_model(args.out, model)
    return {"model": args.out, "kind": model.kind, "layers": len(model.layers), "params": model.n_params}


def cmd_spectrum(args):
    model = models.load_model(_existing(args.model))
    if not 0 <= args.layer < len(model.layers):
        raise UsageError(f"layer {args.layer} out of range 0..{len(model.layers) - 1}")
    S = decompose.spectral_profile(model.layers[args.layer].weight)
    lines = ["index,sigma"] + [f"{i},{s:.17g}" for i, s in enumerate(S)]
    _write(args.out, "\n".join(lines))
    return {"layer": args.layer, "rank": decompose.numerical_rank(S)}


def cmd_decompose(args):
    model = models.load_model(_existing(args.model))
    if args.plan:
        plan = decompose.SplitPlan.from_json(Path(_existing(args.plan)).read_text(), allow_unsafe=args.allow_unsafe)
    else:
        plan = decompose.default_strategy(model, args.head, args.tail, args.K)
    decs = decompose.plan_decomposition(model, plan)
    density = decompose.parameter_density(plan, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_split(model, decs, out / "charlie.bin", out / "david.bin")
    (out / "plan.json").write_text(plan.to_json() + "\n")
    print(f"split {len(decs)} of {len(model.layers)} layers; Charlie holds "
          f"{density.charlie_params} of {density.total_params} parameters (eta = {float(density.eta):.4f})")
    return {"out": str(out), "split_layers": sorted(decs), "eta": float(density.eta)}


def _state_factory(args):
    params, seed = _ring(args), _seed(args)
    path = _existing(args.charlie)
    checkpoint.load_charlie(path, params)  # fail early on a bad file

    def factory(session_id):
        return checkpoint.load_charlie(path, params, seed=seed, session_id=session_id,
                                       tokens=args.tokens, secure=not args.insecure)
    return factory


def cmd_serve_charlie(args):
    config = transport.EndpointConfig("charlie", args.bind, session_timeout=args.timeout)
    server = transport.CharlieServer(config, _state_factory(args))
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"served_sessions": len(server.sessions)}


def cmd_infer(args):
    params = _ring(args)
    david = checkpoint.load_david(_existing(args.david), params, session_id=args.session_id)
    x = _input_array(args.input)
    config = transport.EndpointConfig("david", args.connect, session_timeout=args.timeout, session_id=args.session_id)
    out = transport.david_request_inference(config, david, x, args.inference_id)
    _write(args.out, _output_json(out, params))
    return {"out": args.out}


def cmd_infer_local(args):
    params = _ring(args)
    if args.charlie and args.david:
        model, decs = checkpoint.reassemble(_existing(args.charlie), _existing(args.david))
    elif args.model:
        model, decs = models.load_model(_existing(args.model)), None
    else:
        raise UsageError("infer-local needs --model or both --charlie and --david")
    out = models.forward_reference_quantized(model, _input_array(args.input), params, decs)
    _write(args.out, _output_json(out, params))
    return {"out": args.out}


def cmd_transcripts(args):
    params, seed = _ring(args), _seed(args)
    charlie = checkpoint.load_charlie(_existing(args.charlie), params, seed=seed, tokens=args.tokens,
                                      secure=not args.insecure)
    david = checkpoint.load_david(_existing(args.david), params)
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = charlie.topology.layers[0].cols
    shape = (args.tokens, width) if charlie.topology.kind == "attention_head" else (width,)
    run = P.run_attention_hybrid if charlie.topology.kind == "attention_head" else P.run_mlp_hybrid
    for i in range(args.count):
        t = P.Transcript()
        run(charlie, david, rng.normal(size=shape), transcript=t)
        transport.write_transcript(out / f"transcript_{i:05d}.slt", t, params, charlie.topology)
    return {"out": str(out), "count": args.count, "secure": not args.insecure}


def _load_transcripts(directory):
    files = sorted(Path(_existing(directory)).glob("*.slt"))
    if not files:
        raise UsageError(f"no .slt transcripts in {directory}")
    loaded = [transport.read_transcript(f) for f in files]
    return loaded[0][0], [t for _, t in loaded]


def cmd_attack(args):
    seed = _seed(args)
    if args.kind == "lineq":
        setup, transcripts = _load_transcripts(args.input)
        truth = None
        if args.charlie and args.david:
            truth = checkpoint.reassemble(args.charlie, args.david)[0].layers[args.layer].weight
        elif args.model:
            truth = models.load_model(_existing(args.model)).layers[args.layer].weight
        report, W_hat = redteam.linear_equation_attack(transcripts, args.layer, setup.ring, true_weight=truth)
        report.details["weight_shape"] = list(W_hat.shape)
    elif args.kind == "subspace":
        if args.model:
            W = models.load_model(_existing(args.model)).layers[args.layer].weight
        else:
            n = args.n
            W = np.random.default_rng(seed).normal(size=(n, n))
        dec = decompose.split(W, args.k, allow_unsafe=True)
        try:
            report, _ = redteam.subspace_attack_k1(dec.david_part, (dec.U[:, 0], dec.V[:, 0]))
        except DegenerateError as exc:
            report = redteam.AttackReport("subspace_k1", float("nan"), 0, redteam.RESISTED, "abs_cosine",
                                          {"nullity": exc.nullity, "free_dims": exc.free_dims, "reason": str(exc)})
    elif args.kind == "uniformity":
        if args.input:
            setup, transcripts = _load_transcripts(args.input)
            L = setup.ring.modulus
            samples = np.concatenate([m.vec.values.reshape(-1) for t in transcripts
                                      for m in t.of_type(P.MaskedActivation)])
        else:
            L = args.small_modulus
            samples = redteam.collect_masked_coordinates(L, args.dim, args.runs, seed, secure=not args.insecure)
        bins = min(L, args.bins)
        p = redteam.uniformity_distinguisher(samples, L, bins=bins)
        report = redteam.AttackReport("uniformity", p, int(samples.size),
                                      redteam.BROKEN if p < args.alpha else redteam.RESISTED, "p_value",
                                      {"modulus": L, "bins": bins, "alpha": args.alpha})
    else:  # restore
        task = redteam.make_task(seed=seed)
        base = models.toy_mlp((16, 32, 32, task.n_classes), seed=seed)
        trained = redteam.train(base, task.x_train, task.y_train, epochs=args.train_epochs, lr=0.2)
        baseline = redteam.risk(trained, task.x_eval, task.y_eval)
        decs = {0: decompose.split(trained.layers[0].weight, args.K)} if args.K else {}
        rest = redteam.restoration_attack(redteam.exposed_model(trained, decs), task, args.epochs, baseline)
        if args.curve:
            _write(args.curve, rest.to_csv())
        report = redteam.AttackReport("restoration", rest.kappa, 0,
                                      "surrogate", "kappa",
                                      {k: v for k, v in rest.to_dict().items() if k not in ("curve", "schema_version")})
    _write(args.report, report.to_json())
    return {"attack": report.attack_name, "metric": report.success_metric, "verdict": report.verdict}


def cmd_cost(args):
    if args.preset:
        report = costmodel.preset_report(args.preset, per_round_trip_delay=args.per_round_trip)
    else:
        if not (args.shape and args.edge and args.cloud and args.net):
            raise UsageError("cost needs --preset or all of --shape, --edge, --cloud, --net")
        report = costmodel.total_latency(
            costmodel.load_spec(costmodel.ModelShape, _read_json(args.shape)),
            costmodel.load_spec(costmodel.HardwareSpec, _read_json(args.edge)),
            costmodel.load_spec(costmodel.HardwareSpec, _read_json(args.cloud)),
            costmodel.load_spec(costmodel.NetworkSpec, _read_json(args.net)),
            per_round_trip_delay=args.per_round_trip,
        )
    print("\n".join(report.lines()))
    if args.out:
        _write(args.out, report.to_json())
    return {"t_total_ms": report.t_total * 1e3, "discrepancies": sorted(report.discrepancies)}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random stream (default: $SLIP_SEED or 0)")
    common.add_argument("--modulus", type=int, default=ring.MERSENNE_61, help="prime ring modulus L")
    common.add_argument("--scale", type=int, default=ring.DEFAULT_SCALE, help="fixed-point scale")
    common.add_argument("--json", action="store_true", help="print a JSON status line at the end")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="slip", description="Split-weight hybrid inference toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("toy", parents=[common], help="write a toy model checkpoint")
    p.add_argument("--preset", choices=sorted(TOY_PRESETS), default="toy-mlp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("spectrum", parents=[common], help="singular values of one layer as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("decompose", parents=[common], help="split a model into charlie.bin and david.bin")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", help="plan JSON as written to plan.json (triplets of block, layer_type, K); default: head/tail strategy")
    p.add_argument("--head", type=int, default=1)
    p.add_argument("--tail", type=int, default=1)
    p.add_argument("--K", type=int, default=decompose.DEFAULT_K)
    p.add_argument("--allow-unsafe", action="store_true", help="permit K < 2")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("serve-charlie", parents=[common], help="serve Charlie over TCP")
    p.add_argument("--bind", default="127.0.0.1:0", help="HOST:PORT (port 0 picks a free one)")
    p.add_argument("--charlie", required=True)
    p.add_argument("--tokens", type=int, default=1, help="largest token count per attention input")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--insecure", action="store_true", help="send activations unmasked")
    p.set_defaults(func=cmd_serve_charlie)

    p = sub.add_parser("infer", parents=[common], help="run one inference against a Charlie server")
    p.add_argument("--connect", required=True, help="HOST:PORT")
    p.add_argument("--david", required=True)
    p.add_argument("--input", required=True, help="JSON vector, token matrix, or {\"input\": ...}")
    p.add_argument("--out")
    p.add_argument("--session-id", type=int, default=0)
    p.add_argument("--inference-id", type=int, default=None)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("infer-local", parents=[common], help="monolithic quantized reference")
    p.add_argument("--model")
    p.add_argument("--charlie")
    p.add_argument("--david")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer_local)

    p = sub.add_parser("transcripts", parents=[common], help="record David's view of in-memory runs")
    p.add_argument("--charlie", required=True)
    p.add_argument("--david", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--insecure", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transcripts)

    p = sub.add_parser("attack", parents=[common], help="run an attack or distinguisher")
    p.add_argument("--kind", required=True, choices=["lineq", "subspace", "uniformity", "restore"])
    p.add_argument("--in", dest="input", help="directory of .slt transcripts")
    p.add_argument("--report", help="write the AttackReport JSON here (default: stdout)")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--charlie")
    p.add_argument("--david")
    p.add_argument("--k", type=int, default=1, help="hidden components for the subspace attack")
    p.add_argument("--n", type=int, default=32, help="matrix size when no model is given")
    p.add_argument("--small-modulus", type=int, default=17)
    p.add_argument("--dim", type=int, default=1000)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--insecure", action="store_true")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--train-epochs", type=int, default=300)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--curve", help="CSV path for the restoration curve")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("cost", parents=[common], help="closed-form latency and FLOP report")
    p.add_argument("--preset", choices=sorted(costmodel.PRESETS) + sorted(costmodel.PRESET_ALIASES))
    p.add_argument("--shape")
    p.add_argument("--edge")
    p.add_argument("--cloud")
    p.add_argument("--net")
    p.add_argument("--per-round-trip", action="store_true", help="charge the network delay per split layer")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    want_json = "--json" in (sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        result = args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc, want_json)
    except (SlipError, OverflowError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, exc, want_json)
    if want_json:
        print(json.dumps({"status": "ok", "command": args.command, **(result or {})}, sort_keys=True, default=str))
    return EXIT_OK


def _fail(code, kind, exc, want_json):
    print(f"slip: error: {exc}", file=sys.stderr)
    if want_json:
        print(json.dumps({"status": "error", "error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
