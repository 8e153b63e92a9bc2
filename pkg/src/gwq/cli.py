"""Command-line surface.

Subcommands: train-ref, grads, quantize, dequantize, eval, bench, inspect.
Every path is a thin wrapper over the library; printed values are the
library results verbatim (full float precision via repr).

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 runtime
invariant violation. Failures print one machine-greppable line to stderr:
``error: <category>: <detail>``. File outputs are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, refmodel
from .container import read_container, read_gradients, write_container, write_gradients
from .errors import (AlignmentError, DomainError, GwqError, InputError, ParseError,
                     UsageError)
from .gwqfile import MAGIC, read_gwq, write_gwq
from .kernels import bench as run_bench
from .quantizer import QuantConfig, SUPPORTED_BITS, average_bits, inspect_lines, \
    payload_bits_breakdown, quantize_model
from .sensitivity import HESSIAN_FISHER, HESSIAN_INPUT_SQ, RANDOM, aggregate_gradients, \
    hessian_diag_scores, select_outliers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads_default() -> int:
    try:
        return max(int(os.environ.get("GWQ_THREADS", "1")), 1)
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gwq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ref", parser_class=_Parser, help="train the tiny reference model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("grads", parser_class=_Parser,
                       help="capture calibration gradients into a container file")
    p.add_argument("--weights", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--loss", choices=["ce", "mse"], default="ce")
    p.add_argument("--labels", choices=["dataset", "greedy"], default="dataset")

    p = sub.add_parser("quantize", parser_class=_Parser, help="quantize a weights container")
    p.add_argument("--weights", required=True)
    p.add_argument("--grads")
    p.add_argument("--corpus", help="calibration text (hessian-input-sq method)")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--method", default="gradient",
                   choices=["gradient", "hessian-fisher", "hessian-input-sq", "random"])
    p.add_argument("--scope", choices=["per-layer", "global"], default="per-layer")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dequantize", parser_class=_Parser,
                       help="expand a packed model back to a float32 container")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parser_class=_Parser, help="perplexity/accuracy of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--format", choices=["text", "csv"], default="text")

    p = sub.add_parser("bench", parser_class=_Parser, help="kernel timing and traffic report")
    p.add_argument("--shapes", default="256x256")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--format", choices=["text", "csv"], default="text")

    p = sub.add_parser("inspect", parser_class=_Parser, help="per-tensor dump of a packed model")
    p.add_argument("--model", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _cmd_train_ref(args) -> int:
    config = refmodel.TinyTransformerConfig(
        vocab_size=args.vocab, d_model=args.d_model, n_heads=args.heads,
        n_layers=args.layers, max_seq_len=args.seq_len)
    bundle = refmodel.train_reference(config, _read_text(args.corpus), args.steps,
                                      args.seed, batch_size=args.batch_size, lr=args.lr)
    write_container(bundle, args.out)
    print(f"trained steps={args.steps} final_loss={bundle.metadata['final_loss']} out={args.out}")
    return 0


def _loss_kind(args) -> refmodel.LossKind:
    return refmodel.LossKind(
        variant=refmodel.CROSS_ENTROPY if args.loss == "ce" else refmodel.MSE,
        label_source=refmodel.DATASET_TOKENS if args.labels == "dataset"
        else refmodel.GREEDY_TOKENS)


def _cmd_grads(args) -> int:
    weights = read_container(args.weights)
    samples = harness.calibration_windows(weights, _read_text(args.corpus), args.samples)
    bundles = harness.capture_gradients(weights, samples, _loss_kind(args))
    mean = bundles[0]
    if len(bundles) > 1:
        from .container import GradientBundle
        from .tensor import Tensor
        mean = GradientBundle()
        for name in bundles[0].tensors:
            stacked = np.mean([b.tensors[name].data for b in bundles], axis=0)
            mean.tensors[name] = Tensor(name, stacked.astype(np.float32))
    write_gradients(mean, args.out)
    print(f"captured gradients samples={args.samples} out={args.out}")
    return 0


def _cmd_quantize(args) -> int:
    if args.bits not in SUPPORTED_BITS:
        raise UsageError(f"unsupported bit width {args.bits}; choose from {SUPPORTED_BITS}")
    weights = read_container(args.weights)
    cfg = QuantConfig(bits=args.bits, group_size=args.group, outlier_fraction=args.fraction,
                      scope=args.scope.replace("-", "_"))
    shapes = harness.quantizable_shapes(weights, cfg)

    if args.method == "random":
        mask = harness.random_baseline(shapes, args.fraction, args.seed)
    elif args.method == "hessian-input-sq":
        if not args.corpus:
            raise UsageError("--method hessian-input-sq needs --corpus for activations")
        samples = harness.calibration_windows(weights, _read_text(args.corpus), 1)
        moments = refmodel.linear_input_second_moments(weights, [s[None, :] for s in samples])
        scores = hessian_diag_scores(weights, moments, HESSIAN_INPUT_SQ)
        mask = select_outliers(scores.restrict(shapes), args.fraction, cfg.scope)
    else:
        if not args.grads:
            raise UsageError(f"--method {args.method} needs --grads")
        grads = read_gradients(args.grads, weights)
        if args.method == "hessian-fisher":
            scores = hessian_diag_scores(weights, [grads], HESSIAN_FISHER)
        else:
            scores = aggregate_gradients([grads])
        mask = select_outliers(scores.restrict(shapes), args.fraction, cfg.scope)

    model = quantize_model(weights, mask, cfg)
    write_gwq(model, args.out)
    print(f"quantized tensors={len(model.quantized)} passthrough={len(model.passthrough)} "
          f"avg_bits={average_bits(model):.4f} out={args.out}")
    return 0


def _cmd_dequantize(args) -> int:
    write_container(read_gwq(args.model).to_bundle(), args.out)
    print(f"dequantized out={args.out}")
    return 0


def _load_model(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return read_gwq(path) if magic == MAGIC else read_container(path)


def _cmd_eval(args) -> int:
    model = _load_model(args.model)
    rows = []
    for path in args.corpus:
        text = _read_text(path)
        label = harness.corpus_label(path)
        rows.append((label, refmodel.perplexity(model, text),
                     refmodel.next_token_accuracy(model, text)))
    if args.format == "csv":
        print("corpus,ppl,acc")
        for label, ppl, acc in rows:
            print(f"{label},{ppl!r},{acc!r}")
    else:
        for label, ppl, acc in rows:
            print(f"corpus={label} ppl={ppl!r} acc={acc!r}")
    return 0


def _parse_shapes(text: str) -> list[tuple[int, int]]:
    shapes = []
    for part in text.split(","):
        try:
            m, k = part.lower().split("x")
            shapes.append((int(m), int(k)))
        except ValueError as exc:
            raise UsageError(f"bad shape {part!r}; expected MxK") from exc
    return shapes


def _cmd_bench(args) -> int:
    cfg = QuantConfig(bits=args.bits, group_size=args.group, outlier_fraction=args.fraction)
    threads = args.threads if args.threads is not None else _threads_default()
    reports = [run_bench(shape, cfg, repetitions=args.reps, seed=args.seed, threads=threads)
               for shape in _parse_shapes(args.shapes)]
    if args.format == "csv":
        from dataclasses import fields
        print(",".join(f.name for f in fields(reports[0])))
        for rep in reports:
            from dataclasses import astuple
            print(",".join(str(v) for v in astuple(rep)))
    else:
        for rep in reports:
            for line in rep.lines():
                print(line)
    return 0


def _cmd_inspect(args) -> int:
    model = read_gwq(args.model)
    cfg = model.config
    print(f"config bits={cfg.bits} group={cfg.group_size} "
          f"fraction={cfg.outlier_fraction:.6g} scope={cfg.scope}")
    for line in inspect_lines(model):
        print(line)
    breakdown = payload_bits_breakdown(model)
    included = ["codes", "scales", "zeros", "outlier_indices", "outlier_values"]
    print(f"average_bits={average_bits(model):.6f} over components: {', '.join(included)}")
    print("  " + " ".join(f"{k}={breakdown[k]}" for k in included + ["elements"]))
    return 0


_COMMANDS = {
    "train-ref": _cmd_train_ref,
    "grads": _cmd_grads,
    "quantize": _cmd_quantize,
    "dequantize": _cmd_dequantize,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def dispatch(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, DomainError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except (ParseError, AlignmentError, InputError) as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: parse: {exc}", file=sys.stderr)
        return 2
    except GwqError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
