"""``gsq`` command line: quantize, init-only, finetune-scales, allocate, dequantize, bench, selftest.

Exit status is 0 on success, 2 for bad input and 3 when training diverges.
Every output file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from gsq import blocks, selftest
from gsq.config import ConfigError, QuantConfig, load_config, parse_bits
from gsq.fileio import atomic_write_text
from gsq.pack import PackError, load_packed, report_bpp, save_packed
from gsq.tensor import TensorError, read_tensor, write_tensor
from gsq.trainer import (
    TrainingDiverged,
    allocate_bits,
    average_bpp,
    layer_sensitivity,
    quantize_block,
    quantize_ternary_staged,
    scale_only_finetune,
)
from gsq.warmstart import GPTQError

EXIT_OK, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 2, 3
BENCH_HEADER = ("method", "bits", "bpp", "mse_mean", "mse_std", "wall_clock")

log = logging.getLogger("gsq")


class UsageError(ValueError):
    pass


# ---- argument helpers ---------------------------------------------------


def _named_paths(items: list[str], default_name: str | None = None) -> dict[str, str]:
    """``NAME=PATH`` entries, or a single bare ``PATH`` bound to ``default_name``."""
    out: dict[str, str] = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            if default_name is None or len(items) != 1:
                raise UsageError(f"expected NAME=PATH, got {item!r}")
            name, path = default_name, item
        if name in out:
            raise UsageError(f"layer {name!r} given twice")
        out[name] = path
    return out


def _model(arch: str, names: list[str], activation: str):
    if arch == "linear":
        if len(names) != 1:
            raise UsageError("--arch linear takes exactly one weight matrix")
        return blocks.Linear(names[0])
    if arch == "mlp":
        return blocks.MLPBlock(activation)
    if arch == "chain":
        return blocks.Chain(tuple(names), activation)
    raise UsageError(f"unknown architecture {arch!r}")


_OVERRIDES = {
    "bits": "bits",
    "group": "group_size",
    "epochs": "epochs",
    "seed": "seed",
    "batch_size": "batch_size",
    "micro_batches": "micro_batches",
    "init": "init_method",
    "scale_epochs": "scale_epochs",
}


def _config(args) -> QuantConfig:
    """Defaults, then ``--config`` file, then explicit flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else QuantConfig()
    changes = {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = parse_bits(value) if key == "bits" else value
    if getattr(args, "no_do_no_harm", False):
        changes["do_no_harm"] = False
    return cfg.replace(**changes) if changes else cfg


def _thread_count(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("GSQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)

    return json.dumps(obj, indent=2, sort_keys=True, default=default, allow_nan=False) + "\n"


def _load_layers(items, default_name="w") -> dict[str, np.ndarray]:
    return {name: read_tensor(path) for name, path in _named_paths(items, default_name).items()}


def _write_outputs(out: str, packed: dict, single: bool) -> dict[str, str]:
    if single:
        (name,) = packed
        save_packed(out, packed[name])
        return {name: out}
    Path(out).mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, pt in packed.items():
        p = str(Path(out) / f"{name}.gsqp")
        save_packed(p, pt)
        paths[name] = p
    return paths


def _report_path(args, single: bool) -> str:
    if args.report:
        return args.report
    return args.out + ".json" if single else str(Path(args.out) / "report.json")


def _layer_bpp(packed: dict) -> dict:
    return {k: dict(zip(("stored", "entropy"), report_bpp(p))) for k, p in packed.items()}


# ---- commands -----------------------------------------------------------


def _run_quantize(args, cfg: QuantConfig) -> int:
    layers = _load_layers(args.weights)
    model = _model(args.arch, list(layers), cfg.activation)
    calib = read_tensor(args.calib)
    if args.staged:
        packed, report = quantize_ternary_staged(layers, model, calib, cfg)
    else:
        packed, report = quantize_block(layers, model, calib, cfg)
    single = args.arch == "linear"
    outputs = _write_outputs(args.out, packed, single)
    doc = report.to_dict()
    doc.update(command=args.command, config=cfg.to_dict(), outputs=outputs, layer_bpp=_layer_bpp(packed))
    atomic_write_text(_report_path(args, single), _json(doc))
    print(f"init_mse={report.init_mse:.6g} final_mse={report.final_mse:.6g} "
          f"stored_bpp={doc['stored_bpp']:.4f} fell_back={report.fell_back}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    return _run_quantize(args, _config(args))


def cmd_init_only(args) -> int:
    args.staged = False
    return _run_quantize(args, _config(args).replace(epochs=0, init_method=args.method))


def cmd_finetune_scales(args) -> int:
    cfg = _config(args)
    fp = _load_layers(args.weights)
    packed = {name: load_packed(p) for name, p in _named_paths(args.packed, "w").items()}
    if set(packed) != set(fp):
        raise UsageError(f"--packed layers {sorted(packed)} do not match --weights layers {sorted(fp)}")
    for name in fp:
        if fp[name].shape != (packed[name].rows, packed[name].cols):
            raise UsageError(f"layer {name}: weights {fp[name].shape} vs packed {(packed[name].rows, packed[name].cols)}")
    model = _model(args.arch, list(fp), cfg.activation)
    tuned, report = scale_only_finetune(packed, model, read_tensor(args.calib), fp, cfg)
    single = args.arch == "linear"
    outputs = _write_outputs(args.out, tuned, single)
    doc = report.to_dict()
    doc.update(command=args.command, config=cfg.to_dict(), outputs=outputs, layer_bpp=_layer_bpp(tuned))
    atomic_write_text(_report_path(args, single), _json(doc))
    print(f"mse_before={report.init_mse:.6g} mse_after={report.final_mse:.6g} fell_back={report.fell_back}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    layers = _load_layers(args.weights, default_name=None)
    calibs = _named_paths(args.calib, default_name="*")
    sens = {}
    for name, w in layers.items():
        path = calibs.get(name, calibs.get("*"))
        if path is None:
            raise UsageError(f"no calibration data for layer {name!r}")
        sens[name] = layer_sensitivity(w, read_tensor(path), args.group, args.low, args.high)
    counts = {name: int(w.size) for name, w in layers.items()}
    bits = allocate_bits(counts, sens, args.target_bpp, args.low, args.high, args.group)
    doc = {
        "target_bpp": args.target_bpp,
        "average_bpp": average_bpp(counts, bits, args.group),
        "bits": bits,
        "sensitivity": sens,
        "parameters": counts,
    }
    text = _json(doc)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dequantize(args) -> int:
    write_tensor(args.out, load_packed(args.packed).dequantize())
    return EXIT_OK


def bench_rows(w, x, bits_list, seeds, cfg: QuantConfig, methods=("rtn", "gptq", "gsq")) -> list[dict]:
    """One row per (method, bits); MSE is the held-out hard reconstruction error."""
    rows = []
    for bits in bits_list:
        for method in methods:
            run_seeds = seeds if method == "gsq" else seeds[:1]
            mses, times, bpp = [], [], float("nan")
            for seed in run_seeds:
                c = cfg.replace(bits=bits, seed=seed)
                if method != "gsq":
                    c = c.replace(epochs=0, init_method=method)
                packed, report = quantize_block({"w": w}, blocks.Linear("w"), x, c)
                mses.append(report.final_mse)
                times.append(report.wall_clock)
                bpp = report.extra["stored_bpp"]
            rows.append({
                "method": method,
                "bits": "t" if bits == 0 else bits,
                "bpp": bpp,
                "mse_mean": float(np.mean(mses)),
                "mse_std": float(np.std(mses)),
                "wall_clock": float(np.mean(times)),
            })
    return rows


def format_bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(BENCH_HEADER)
    for r in rows:
        wr.writerow([
            r["method"], r["bits"], f"{r['bpp']:.6g}", f"{r['mse_mean']:.9g}", f"{r['mse_std']:.9g}",
            f"{r['wall_clock']:.3f}",
        ])
    return buf.getvalue()


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    bits_list = [parse_bits(b) for b in args.bits_list]
    seeds = [cfg.seed + i for i in range(args.seeds)]
    methods = tuple(m.strip() for m in args.methods.split(","))
    unknown = set(methods) - {"rtn", "gptq", "gsq"}
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    text = format_bench_csv(bench_rows(read_tensor(args.weights), read_tensor(args.calib), bits_list, seeds, cfg, methods))
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if selftest.run(sys.stdout) == 0 else 1


# ---- parser -------------------------------------------------------------


def _common(p, training=True, bits=True):
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", help="BLAS thread cap (falls back to $GSQ_THREADS, then 1)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    if training:
        if bits:
            p.add_argument("--bits", help="t (ternary) or 2..8")
        p.add_argument("--group", type=int, help="group size (default 128)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--micro-batches", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsq", description="Gumbel-Softmax weight quantization")
    sub = parser.add_subparsers(dest="command", required=True)

    def quant_inputs(p):
        p.add_argument("--weights", nargs="+", required=True, metavar="[NAME=]PATH", help="GSQT weight matrices")
        p.add_argument("--calib", required=True, help="GSQT calibration activations")
        p.add_argument("--arch", choices=("linear", "mlp", "chain"), default="linear")
        p.add_argument("--out", required=True, help="GSQP file (linear) or output directory")
        p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("quantize", help="optimize and pack")
    _common(p)
    quant_inputs(p)
    p.add_argument("--staged", action="store_true", help="layerwise warm-up, then joint block stage")
    p.add_argument("--init", choices=("gptq", "rtn"))
    p.add_argument("--no-do-no-harm", action="store_true", help="keep the optimized result even if worse")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("init-only", help="pack the warm-start baseline")
    _common(p)
    quant_inputs(p)
    p.add_argument("--method", choices=("gptq", "rtn"), default="gptq")
    p.set_defaults(func=cmd_init_only)

    p = sub.add_parser("finetune-scales", help="refine group scales with codes frozen")
    _common(p, training=False)
    p.add_argument("--packed", nargs="+", required=True, metavar="[NAME=]PATH")
    p.add_argument("--weights", nargs="+", required=True, metavar="[NAME=]PATH", help="full-precision reference")
    p.add_argument("--calib", required=True)
    p.add_argument("--arch", choices=("linear", "mlp", "chain"), default="linear")
    p.add_argument("--scale-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_finetune_scales)

    p = sub.add_parser("allocate", help="choose per-layer bit-widths under an average budget")
    _common(p, training=False)
    p.add_argument("--weights", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--calib", nargs="+", required=True, metavar="[NAME=]PATH")
    p.add_argument("--target-bpp", type=float, required=True)
    p.add_argument("--low", type=int, default=2)
    p.add_argument("--high", type=int, default=3)
    p.add_argument("--group", type=int, default=128)
    p.add_argument("--out", help="JSON output (stdout if omitted)")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("dequantize", help="expand a GSQP file to a dense GSQT matrix")
    _common(p, training=False)
    p.add_argument("--packed", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("bench", help="compare rtn, gptq and gsq on one layer")
    _common(p, bits=False)
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--bits", dest="bits_list", nargs="+", default=["2", "3"], metavar="BITS")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--methods", default="rtn,gptq,gsq")
    p.add_argument("--out", help="CSV output (stdout if omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run the invariant battery")
    _common(p, training=False)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_thread_count(args)):
            return args.func(args)
    except TrainingDiverged as e:
        print(f"gsq: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, TensorError, PackError, GPTQError, ValueError, OSError) as e:
        print(f"gsq: error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
