"""Command-line interface: ``psens {analyze,rdp,gen,train,ps-report}``.

Exit codes: 0 success, 2 usage/parse/schema error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from psens import __version__, nnlab, optim, tape
from psens.expr import ExprGraph
from psens.parse import ParseError, parse_expression
from psens.privacy import DpSgdParams, MechanismParams, individual_rdp
from psens.sens import VARIANTS, sensitivity_bundle

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# worked example; its published Delta2 is echoed in analysis.json for comparison
REF_QUERY = "a^2 + exp(2*b - a)"
REF_RANGES = {"a": (1.0, 2.0), "b": (0.5, 3.0)}
REPORTED_DELTA2 = 66.19

DATASET_FORMAT = "psens-dataset"
WEIGHTS_FORMAT = "psens-weights"
SCHEMA_VERSION = 1

DEFAULTS = {
    "analyze": {"grid": 100, "variant": "fractional", "out": "."},
    "rdp": {"lphi": 1.0},
    "gen": {"seed": 7, "n_train": 1000, "n_test": 100, "noise_std": 0.2, "out": "."},
    "train": {
        "optimizer": "sgd",
        "learning_rate": 0.1,
        "max_epochs": 5000,
        "tol": 1e-7,
        "init_seed": 42,
        "clip": 0.1,
        "noise_multiplier": 5.0,
        "dp_seed": 42,
        "out": ".",
    },
    "ps_report": {"split": "train", "variant": "fractional", "bins": 50, "out": "."},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- formatting helpers -------------------------------------------------------


def fmt(x) -> str:
    """17 significant digits: round-trips any float64."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, allow_nan=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from None


def metadata(command: str, config: dict, seeds: dict) -> dict:
    return {"tool": "psens", "version": __version__, "command": command, "config": config, "seeds": seeds}


def write_run_metadata(out: Path, meta: dict) -> None:
    full = dict(meta, timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat())
    write_json(out / "run_metadata.json", full)


def out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- argument handling ------------------------------------------------------


def parse_range(text: str) -> tuple[str, tuple[float, float]]:
    try:
        name, bounds = text.split("=", 1)
        lo, hi = bounds.split(":", 1)
        return name.strip(), (float(lo), float(hi))
    except ValueError:
        raise CliError(f"bad range {text!r}; expected NAME=LO:HI") from None


def parse_point(items) -> dict[str, float]:
    point = {}
    for item in items:
        for part in item.split(","):
            if not part.strip():
                continue
            try:
                name, value = part.split("=", 1)
                point[name.strip()] = float(value)
            except ValueError:
                raise CliError(f"bad point assignment {part!r}; expected NAME=V") from None
    return point


def resolve(args: argparse.Namespace, section: str) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS.get(section, {}))
    if getattr(args, "config", None):
        loaded = read_json(args.config)
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if key in ("config", "func", "command") or value is None:
            continue
        cfg[key] = value
    return cfg


def _expression_setup(cfg: dict):
    if not cfg.get("expr"):
        raise CliError("--expr is required")
    g = ExprGraph()
    try:
        parsed = parse_expression(g, cfg["expr"])
    except ParseError as exc:
        raise CliError(f"parse error: {exc.diagnostic()}") from None
    ranges = dict(parse_range(r) if isinstance(r, str) else (r[0], tuple(r[1])) for r in cfg.get("range") or [])
    missing = [v for v in parsed.variables if v not in ranges]
    if missing:
        raise CliError(f"missing --range for: {', '.join(missing)}")
    names = list(parsed.variables)
    try:
        box = optim.BoxDomain.from_mapping({n: ranges[n] for n in names})
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return g, parsed, names, box


def _reported_comparison(g: ExprGraph, root, box) -> dict | None:
    ref = parse_expression(g, REF_QUERY)
    same_ranges = dict(zip(box.names, zip(box.lows, box.highs))) == REF_RANGES
    if ref.root == root and same_ranges:
        return {"query": REF_QUERY, "ranges": {k: list(v) for k, v in REF_RANGES.items()}, "reported_delta2": REPORTED_DELTA2}
    return None


# -- commands ---------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = resolve(args, "analyze")
    g, parsed, names, box = _expression_setup(cfg)
    variant = cfg["variant"]
    if variant not in VARIANTS:
        raise CliError(f"unknown variant {variant!r}")
    grid = int(cfg["grid"])
    if grid < 2:
        raise CliError("--grid must be >= 2")

    result = optim.global_sensitivity(g, parsed.root, names, box)
    bundle = sensitivity_bundle(g, parsed.root, names, variants=(variant,))
    ps = bundle.partial_sensitivity(variant)
    roots = [("grad_norm", bundle.grad_norm)] + [(f"ps_{n}", ps[n]) for n in names]
    prog = tape.compile(g, roots, names)

    axes = box.lattice_axes(grid)
    mesh = np.meshgrid(*axes, indexing="ij")
    cols = [m.ravel() for m in mesh]
    values = prog.run_columns(cols, n_rows=cols[0].size)
    defined = np.isfinite(values).all(axis=0)
    finite_norms = values[0][np.isfinite(values[0])]
    grid_max = float(finite_norms.max()) if finite_norms.size else math.nan

    out = out_dir(cfg["out"])
    header = names + ["grad_norm"] + [f"ps_{n}" for n in names] + ["defined"]
    rows = (
        [fmt(c[r]) for c in cols] + [fmt(v) for v in values[:, r]] + [int(defined[r])]
        for r in range(cols[0].size)
    )
    config = {k: cfg[k] for k in ("expr", "grid", "variant")}
    config["ranges"] = {n: [lo, hi] for n, lo, hi in zip(box.names, box.lows, box.highs)}
    meta = metadata("analyze", config, {})
    try:
        write_csv(out / "surface.csv", header, rows)
        analysis = {
            "metadata": meta,
            "expression": cfg["expr"],
            "variables": names,
            "variant": variant,
            "global_sensitivity": {
                "value": result.value,
                "argmax": result.argmax,
                "evaluations": result.evaluations,
                "seeds_used": result.seeds_used,
            },
            "surface_grid_max_grad_norm": grid_max,
            "consistent_with_surface_grid": bool(result.value >= grid_max),
            "reported_comparison": _reported_comparison(g, parsed.root, box),
        }
        write_json(out / "analysis.json", analysis)
        write_run_metadata(out, meta)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO) from None
    print(f"global L2-sensitivity {fmt(result.value)} at {result.argmax}")
    return EXIT_OK


def cmd_rdp(args) -> int:
    cfg = resolve(args, "rdp")
    g, parsed, names, box = _expression_setup(cfg)
    if cfg.get("alpha") is None or cfg.get("sigma") is None:
        raise CliError("--alpha and --sigma are required")
    alpha, sigma, lphi = float(cfg["alpha"]), float(cfg["sigma"]), float(cfg["lphi"])
    if not alpha > 1:
        raise CliError("--alpha must be > 1")
    if not sigma > 0:
        raise CliError("--sigma must be > 0")
    point = parse_point(cfg.get("at") or [])
    missing = [n for n in names if n not in point]
    if missing:
        raise CliError(f"missing --at value for: {', '.join(missing)}")
    if not box.contains([point[n] for n in names]):
        print("warning: point lies outside the declared ranges", file=sys.stderr)

    bundle = sensitivity_bundle(g, parsed.root, names, variants=())
    prog = tape.compile(g, [("grad_norm", bundle.grad_norm)], names)
    outcome = tape.evaluate(prog, [point[n] for n in names])
    if not outcome.defined[0]:
        raise CliError("gradient norm is undefined at this point", EXIT_NUMERIC)
    grad_norm = outcome.values[0]
    rdp = individual_rdp(alpha, MechanismParams(sigma=sigma, lipschitz_agg=lphi), grad_norm)
    sens = optim.global_sensitivity(g, parsed.root, names, box).value
    payload = {
        "grad_norm": grad_norm,
        "alpha": alpha,
        "epsilon": rdp.epsilon,
        "sigma": sigma,
        "global_sensitivity": sens,
        "sigma_to_sensitivity_ratio": sigma / sens if sens > 0 else None,
    }
    print(json.dumps(payload))
    return EXIT_OK


def dataset_to_json(data: nnlab.Dataset, meta: dict) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": SCHEMA_VERSION,
        "metadata": meta,
        "spec": {
            "image_side": data.spec.image_side,
            "n_train_per_class": data.spec.n_train_per_class,
            "n_test_per_class": data.spec.n_test_per_class,
            "noise_std": data.spec.noise_std,
            "seed": data.spec.seed,
        },
        **{
            s.name: {"images": s.images.tolist(), "labels": s.labels.tolist()}
            for s in (data.train, data.test)
        },
    }


def dataset_from_json(obj: dict) -> nnlab.Dataset:
    if not isinstance(obj, dict) or obj.get("format") != DATASET_FORMAT or obj.get("version") != SCHEMA_VERSION:
        raise CliError("not a psens dataset file (format/version mismatch)")
    try:
        spec = nnlab.DataSpec(**obj["spec"])
        splits = []
        for name in ("train", "test"):
            images = np.asarray(obj[name]["images"], dtype=np.float64).reshape(-1, nnlab.N_PIXELS)
            labels = np.asarray(obj[name]["labels"], dtype=np.int64)
            if len(images) != len(labels) or not set(labels.tolist()) <= {0, 1}:
                raise ValueError(f"inconsistent {name} split")
            splits.append(nnlab.Split(name, images, labels))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"dataset schema mismatch: {exc}") from None
    return nnlab.Dataset(spec, *splits)


def load_weights(path: str) -> np.ndarray:
    obj = read_json(path)
    if not isinstance(obj, dict) or obj.get("format") != WEIGHTS_FORMAT or obj.get("version") != SCHEMA_VERSION:
        raise CliError("not a psens weights file (format/version mismatch)")
    try:
        return nnlab.check_weights(obj["weights"])
    except (KeyError, ValueError) as exc:
        raise CliError(f"weights schema mismatch: {exc}") from None


def cmd_gen(args) -> int:
    cfg = resolve(args, "gen")
    try:
        spec = nnlab.DataSpec(
            n_train_per_class=int(cfg["n_train"]),
            n_test_per_class=int(cfg["n_test"]),
            noise_std=float(cfg["noise_std"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    data = nnlab.gen_synthetic(spec)
    config = {k: cfg[k] for k in ("n_train", "n_test", "noise_std", "seed")}
    meta = metadata("gen", config, {"data": spec.seed})
    out = out_dir(cfg["out"])
    write_json(out / "dataset.json", dataset_to_json(data, meta))
    write_run_metadata(out, meta)
    print(f"wrote {len(data.train)} train and {len(data.test)} test images")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args, "train")
    if not cfg.get("data"):
        raise CliError("--data is required")
    data = dataset_from_json(read_json(cfg["data"]))
    try:
        dp = None
        if cfg["optimizer"] == "dpsgd":
            dp = DpSgdParams(
                clip_bound=float(cfg["clip"]),
                noise_multiplier=float(cfg["noise_multiplier"]),
                learning_rate=float(cfg["learning_rate"]),
                batch_size=len(data.train),
                seed=int(cfg["dp_seed"]),
            )
        tcfg = nnlab.TrainConfig(
            optimizer=cfg["optimizer"],
            learning_rate=float(cfg["learning_rate"]),
            max_epochs=int(cfg["max_epochs"]),
            convergence_tol=float(cfg["tol"]),
            init_seed=int(cfg["init_seed"]),
            dp=dp,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    model = nnlab.build_mlp()
    result = nnlab.train(model, data, tcfg)

    keys = ["optimizer", "learning_rate", "max_epochs", "tol", "init_seed"]
    if dp is not None:
        keys += ["clip", "noise_multiplier", "dp_seed"]
    config = {k: cfg[k] for k in keys}
    config["batch_size"] = len(data.train)
    config["weight_init"] = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer"
    seeds = {"data": data.spec.seed, "init": tcfg.init_seed}
    if dp is not None:
        seeds["dp_noise"] = dp.seed
    meta = metadata("train", config, seeds)
    out = out_dir(cfg["out"])
    write_json(
        out / "weights.json",
        {
            "format": WEIGHTS_FORMAT,
            "version": SCHEMA_VERSION,
            "metadata": meta,
            "layout": {k: [s.start, s.stop] for k, s in nnlab.LAYER_SLICES.items()},
            "epochs": result.epochs,
            "converged": result.converged,
            "final_train_loss": result.train_loss[-1],
            "final_test_accuracy": result.test_accuracy[-1],
            "weights": result.weights.tolist(),
        },
    )
    write_csv(
        out / "training_log.csv",
        ["epoch", "train_loss", "test_accuracy"],
        ([t, fmt(loss), fmt(acc)] for t, (loss, acc) in enumerate(zip(result.train_loss, result.test_accuracy))),
    )
    write_run_metadata(out, meta)
    print(f"{result.epochs} epochs, train loss {fmt(result.train_loss[-1])}, test accuracy {result.test_accuracy[-1]}")
    return EXIT_OK


def cmd_ps_report(args) -> int:
    cfg = resolve(args, "ps_report")
    if not cfg.get("data") or not cfg.get("weights"):
        raise CliError("--data and --weights are required")
    data = dataset_from_json(read_json(cfg["data"]))
    weights = load_weights(cfg["weights"])
    if cfg["variant"] not in VARIANTS:
        raise CliError(f"unknown variant {cfg['variant']!r}")
    split = data.split(cfg["split"])
    if len(split) == 0:
        raise CliError(f"split {split.name!r} is empty")
    report = nnlab.ps_report(nnlab.build_mlp(), weights, split, cfg["variant"], int(cfg["bins"]))

    out = out_dir(cfg["out"])
    maxmap_rows = []
    for c in (0, 1):
        for p in range(nnlab.N_PIXELS):
            maxmap_rows.append(
                [c, p, fmt(report.max_abs_map[c][p]), fmt(report.min_signed[c][p]), fmt(report.max_signed[c][p])]
            )
    write_csv(out / "maxmap.csv", ["class", "pixel_index", "max_abs", "min_signed", "max_signed"], maxmap_rows)
    edges = report.bin_edges
    hist_rows = (
        [p, fmt(edges[b]), fmt(edges[b + 1]), int(report.hist_counts[p, b])]
        for p in range(nnlab.N_PIXELS)
        for b in range(len(edges) - 1)
    )
    write_csv(out / "hist.csv", ["pixel_index", "bin_lo", "bin_hi", "count"], hist_rows)
    write_csv(
        out / "undefined_counts.csv",
        ["pixel_index", "undefined_count"],
        ([p, int(c)] for p, c in enumerate(report.undefined_counts)),
    )
    config = {k: cfg[k] for k in ("data", "weights", "split", "variant", "bins")}
    write_run_metadata(out, metadata("ps-report", config, {"data": data.spec.seed}))
    print(f"pooled mean |PS| {fmt(report.pooled_abs_mean())}, normalised dispersion {fmt(report.normalized_dispersion())}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psens", description="Symbolic partial-sensitivity analysis.")
    parser.add_argument("--version", action="version", version=f"psens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file mirroring the flags (flags win)")
        return p

    p = common(sub.add_parser("analyze", help="global sensitivity + partial-sensitivity surface"))
    p.add_argument("--expr")
    p.add_argument("--range", action="append", metavar="NAME=LO:HI")
    p.add_argument("--grid", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = common(sub.add_parser("rdp", help="individual Renyi-DP guarantee at one point"))
    p.add_argument("--expr")
    p.add_argument("--range", action="append", metavar="NAME=LO:HI")
    p.add_argument("--at", action="append", metavar="NAME=V,...")
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--lphi", type=float)
    p.set_defaults(func=cmd_rdp)

    p = common(sub.add_parser("gen", help="generate the synthetic bar-image dataset"))
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, help="training images per class")
    p.add_argument("--n-test", type=int, help="test images per class")
    p.add_argument("--noise-std", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("train", help="train the MLP with SGD or DP-SGD"))
    p.add_argument("--data")
    p.add_argument("--optimizer", choices=("sgd", "dpsgd"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--tol", type=float, help="convergence tolerance on |loss change|")
    p.add_argument("--init-seed", type=int)
    p.add_argument("--clip", type=float, help="DP-SGD L2 clipping bound")
    p.add_argument("--noise-multiplier", type=float)
    p.add_argument("--dp-seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("ps-report", help="per-pixel partial-sensitivity maps and histograms"))
    p.add_argument("--data")
    p.add_argument("--weights")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--bins", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ps_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except nnlab.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
