"""Command-line surface: quantize, slice, search, eval, bench, route.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All randomness
flows from explicit seeds, so every command is byte-idempotent given the
same arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .evo import SearchParams, search
from .grid import BitWidthSet
from .harness import CalibSet, ToyModel, analyze_routing, eval_kl, eval_recon, run_pipeline
from .matmul import bench
from .slicing import SliceError, slice_model
from .checkpoint import SlicedModel


class UsageError(ValueError):
    pass


def _parse_model(spec: str, dim: int, blocks: int, vocab: int) -> ToyModel:
    if spec.startswith("toy:"):
        return ToyModel.create(seed=int(spec.split(":", 1)[1]), dim=dim,
                               n_blocks=blocks, vocab=vocab)
    if spec == "toy":
        return ToyModel.create(seed=0, dim=dim, n_blocks=blocks, vocab=vocab)
    raise UsageError("unknown model spec %r (expected toy:<seed>)" % spec)


def _parse_calib(spec: str, dim: int, n_calib: int, n_heldout: int) -> CalibSet:
    if spec.startswith("synthetic:"):
        return CalibSet.generate(int(spec.split(":", 1)[1]), dim,
                                 n_calib=n_calib, n_heldout=n_heldout)
    data = np.load(spec)
    if data.ndim != 2 or data.shape[1] != dim:
        raise UsageError("calibration matrix must be (n, %d)" % dim)
    split = max(1, int(data.shape[0] * 0.8))
    return CalibSet(calib=data[:split], heldout=data[split:])


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _require_checkpoint(path) -> Checkpoint:
    model = read_checkpoint(path)
    if not isinstance(model, Checkpoint):
        raise UsageError("expected a parent checkpoint, got a sliced model")
    return model


def _add_model_args(p):
    p.add_argument("--model", default="toy:0")
    p.add_argument("--calib", default="synthetic:0")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--calib-n", type=int, default=2048)
    p.add_argument("--heldout-n", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestquant")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a model into a nested checkpoint")
    _add_model_args(p)
    p.add_argument("--bits", default="3,4,8")
    p.add_argument("--lambda", dest="lambdas", default=None)
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--damp", type=float, default=0.01)
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--out", required=True)

    p = sub.add_parser("slice", help="slice a checkpoint to lower bit-widths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="search per-layer bit-widths under a budget")
    _add_model_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--avg-bits", type=float, default=3.0)
    p.add_argument("--generations", type=int, default=100)
    p.add_argument("--offspring", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ladder", default="2,3,4,6,8")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint (KL or reconstruction)")
    _add_model_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--metric", choices=("kl", "recon"), default="kl")
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="benchmark the packed matmul kernels")
    p.add_argument("--m", type=int, default=4096)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("route", help="per-token best block config analysis")
    _add_model_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--block-index", type=int, default=0)
    p.add_argument("--tokens", type=int, default=512)
    p.add_argument("--ladder", default="2,3,4")
    p.add_argument("--avg-bits", type=int, default=3)
    p.add_argument("--out", default=None)

    return parser


def _cmd_quantize(args) -> int:
    bits_list = _parse_int_list(args.bits)
    lambdas = (_parse_float_list(args.lambdas) if args.lambdas
               else [1.0] * len(bits_list))
    if len(lambdas) != len(bits_list):
        raise UsageError("lambda/bits length mismatch")
    order = np.argsort(bits_list)
    bits = BitWidthSet(tuple(bits_list[i] for i in order),
                       tuple(lambdas[i] for i in order))
    model = _parse_model(args.model, args.dim, args.blocks, args.vocab)
    calib = _parse_calib(args.calib, args.dim, args.calib_n, args.heldout_n)
    ckpt, diagnostics = run_pipeline(
        model, calib, bits, group_size=args.group_size,
        damp_rel=args.damp, block_size=args.block,
    )
    write_checkpoint(ckpt, args.out)
    for diag in diagnostics:
        recon = " ".join(
            "r%d=%.4e" % (r, v) for r, v in sorted(diag["recon"].items())
        )
        print("%-18s objective=%.4e %s" % (diag["layer"], diag["objective"], recon))
    print("wrote %s (%d layers)" % (args.out, len(ckpt.layers)))
    return 0


def _cmd_slice(args) -> int:
    ckpt = _require_checkpoint(args.ckpt)
    if (args.bits is None) == (args.config is None):
        raise UsageError("exactly one of --bits / --config is required")
    if args.bits is not None:
        if args.bits > ckpt.master_bits:
            raise SliceError("cannot slice upward")
        spec = {ly.name: args.bits for ly in ckpt.layers}
    else:
        with open(args.config) as fh:
            spec = {k: int(v) for k, v in json.load(fh).items()}
    sliced = slice_model(ckpt, spec)
    model = SlicedModel(
        master_bits=ckpt.master_bits, bits=ckpt.bits,
        group_size=ckpt.group_size, damp_rel=ckpt.damp_rel,
        layers=[sliced[ly.name] for ly in ckpt.layers],
    )
    write_checkpoint(model, args.out)
    print("wrote %s" % args.out)
    return 0


def _cmd_search(args) -> int:
    ckpt = _require_checkpoint(args.ckpt)
    model = _parse_model(args.model, args.dim, args.blocks, args.vocab)
    calib = _parse_calib(args.calib, args.dim, args.calib_n, args.heldout_n)
    params = SearchParams(generations=args.generations, offspring=args.offspring,
                          seed=args.seed)
    best, log = search(ckpt, model, args.avg_bits, params, calib.calib,
                       ladder=tuple(_parse_int_list(args.ladder)))
    with open(args.out, "w") as fh:
        json.dump(best.config.assignment, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if args.log:
        with open(args.log, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print("best fitness %.6e -> %s" % (best.fitness, args.out))
    return 0


def _cmd_eval(args) -> int:
    ckpt = _require_checkpoint(args.ckpt)
    model = _parse_model(args.model, args.dim, args.blocks, args.vocab)
    calib = _parse_calib(args.calib, args.dim, args.calib_n, args.heldout_n)
    if args.metric == "kl":
        if (args.bits is None) == (args.config is None):
            raise UsageError("exactly one of --bits / --config is required")
        if args.bits is not None:
            if args.bits != 16 and args.bits > ckpt.master_bits:
                raise SliceError("cannot slice upward")
            spec = args.bits
            label = {"bits": args.bits}
        else:
            with open(args.config) as fh:
                spec = {k: int(v) for k, v in json.load(fh).items()}
            label = {"config": args.config}
        value = eval_kl(model, ckpt, spec, calib.heldout)
        record = {"metric": "kl", "value": value, **label}
        text = json.dumps(record, sort_keys=True)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        print(text)
        return 0
    rows = eval_recon(model, ckpt, calib)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["layer", "bits", "error"])
        for row in rows:
            writer.writerow([row["layer"], row["bits"], "%.12e" % row["error"]])
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_bench(args) -> int:
    if args.bits not in (2, 3, 4):
        raise UsageError("unsupported bits")
    if args.reps < 3:
        raise UsageError("reps must be >= 3")
    for record in bench(args.m, args.k, args.batch, args.bits, reps=args.reps,
                        group_size=args.group_size, seed=args.seed):
        print(json.dumps(record, sort_keys=True))
    return 0


def _cmd_route(args) -> int:
    ckpt = _require_checkpoint(args.ckpt)
    model = _parse_model(args.model, args.dim, args.blocks, args.vocab)
    calib = _parse_calib(args.calib, args.dim, args.calib_n, args.heldout_n)
    data = calib.heldout[: args.tokens]
    result = analyze_routing(ckpt, model, args.block_index, data,
                             ladder=tuple(_parse_int_list(args.ladder)),
                             avg_bits=args.avg_bits)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["token", "best_config", "mse"])
        for t, ci in enumerate(result["best"]):
            writer.writerow([t, result["configs"][ci],
                             "%.12e" % result["mse"][ci, t]])
    finally:
        if args.out:
            out.close()
    histogram = {
        "metric": "routing",
        "configs": len(result["configs"]),
        "win_counts": result["win_counts"],
        "plurality_config": result["plurality_config"],
        "plurality_share": result["plurality_share"],
    }
    stream = sys.stderr if args.out is None else sys.stdout
    print(json.dumps(histogram, sort_keys=True), file=stream)
    return 0


_DISPATCH = {
    "quantize": _cmd_quantize,
    "slice": _cmd_slice,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "route": _cmd_route,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
