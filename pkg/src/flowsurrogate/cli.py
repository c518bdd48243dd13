"""Command-line entry point: ``flowsurrogate <subcommand> [flags]``.

Every subcommand writes a JSON run manifest listing its outputs with content
hashes.  Failures print one JSON line ``{"error": category, "message": ...}``
to stderr and exit with the category's code; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, nets, uq
from .errors import ConfigError, FlowSurrogateError
from .simulator import FluidProps, WellSpec, generate_dataset, generate_permeability, sample_seeds
from .training import NormStats, Splits, TrainConfig, Trainer

log = logging.getLogger("flowsurrogate")

USAGE_EXIT = 2
IO_EXIT = 15
FAULT_OPS = ("add", "sub", "mul", "div", "scale", "square", "power", "sigmoid", "tanh", "relu",
             "sum", "reshape", "getitem", "concat", "stack", "pad", "dropout", "conv2d", "maxpool",
             "unpool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(category: str, message: str) -> None:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=io._json_default))


def _splits(text: str) -> Splits:
    try:
        train, val, test = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("splits must be three integers: TRAIN,VAL,TEST") from None
    return Splits(train, val, test)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


# -- gen-data -----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    out = Path(args.out) if args.out else io.default_output_dir() / "dataset.fsd"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(args.n, args.grid, args.steps, args.pvi, args.corr_len, args.log_std,
                          args.seed, pressure_updates=args.pressure_updates)
    io.write_dataset(ds, out)
    manifest = io.write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data",
                                 ds.header["generator"], ds.header["seeds"], [out],
                                 time.perf_counter() - start)
    _print({"dataset": str(out), "samples": args.n, "sha256": manifest["outputs"][out.name]})
    return 0


# -- train ----------------------------------------------------------------------------
def _train_config(args) -> TrainConfig:
    lam = args.lam
    if args.channels is None:
        channels = 2 if lam > 0 else 1
    else:
        channels = args.channels
        if lam > 0 and channels != 2:
            raise UsageError("--lambda > 0 needs the pressure channel (--channels 2)")
    base = TrainConfig.desk_scale(lr=1e-3) if args.preset == "desk" else TrainConfig()
    overrides = {"model": args.model, "lam": lam, "channels": channels, "seed": args.seed}
    for flag, key in (("lr", "lr"), ("epochs", "epochs"), ("batch", "batch_size"),
                      ("splits", "splits"), ("dropout", "dropout"), ("weight_decay", "weight_decay")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return TrainConfig(**{**base.__dict__, **overrides})


def _data_meta(header: dict) -> dict:
    return {k: header[k] for k in ("generator", "pvi", "horizon", "fluids") if k in header}


def cmd_train(args) -> int:
    start = time.perf_counter()
    config = _train_config(args)
    ds = io.read_dataset(args.data)
    out = Path(args.out) if args.out else io.default_output_dir() / f"run-{config.model}-{config.seed}"
    out.mkdir(parents=True, exist_ok=True)

    trainer = Trainer(ds, config)
    params, report = trainer.train()
    meta = {
        "model": config.model,
        "model_config": trainer.model_config.to_dict(),
        "train_config": config.to_dict(),
        "norm_stats": trainer.data.stats.to_dict(),
        "data": _data_meta(ds.header),
        "data_sha256": io.sha256_file(args.data),
    }
    ckpt, rep_json, rep_csv = out / "checkpoint.fsc", out / "loss_report.json", out / "losses.csv"
    io.write_checkpoint(ckpt, params, meta)
    rep_json.write_text(report.to_json())
    rep_csv.write_text(report.to_csv())
    io.write_manifest(out / "manifest.json", "train", config.to_dict(), [config.seed],
                      [ckpt, rep_json, rep_csv], time.perf_counter() - start,
                      {"data": str(args.data), "data_sha256": meta["data_sha256"],
                       "train_wall_time_s": report.wall_time})
    _print({"out": str(out), "best_epoch": report.best_epoch, "test_mse": report.test_loss,
            "physics": report.physics, "param_count": report.param_count})
    return 0


# -- checkpoint helpers ----------------------------------------------------------------
def load_model(path):
    """Rebuild ``(kind, params, model_config, train_config, stats, header)`` from a checkpoint."""
    arrays, header = io.read_checkpoint(path)
    try:
        kind = header["model"]
        mcfg = nets.ModelConfig.from_dict(header["model_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        stats = NormStats(**header["norm_stats"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint {path} lacks model metadata: {exc}") from None
    params = nets.init_weights(mcfg, kind, 0)
    if set(params) != set(arrays):
        raise ConfigError(f"checkpoint {path} tensors do not match a {kind} model")
    params.load(arrays)
    return kind, params, mcfg, tcfg, stats, header


def cmd_eval(args) -> int:
    start = time.perf_counter()
    kind, params, mcfg, tcfg, stats, _ = load_model(args.checkpoint)
    ds = io.read_dataset(args.data)
    if ds.grid != (mcfg.grid, mcfg.grid) or ds.steps != mcfg.steps:
        raise ConfigError(f"dataset grid {ds.grid}, T={ds.steps} does not match the model "
                          f"({mcfg.grid}x{mcfg.grid}, T={mcfg.steps})")
    splits = tcfg.splits
    if args.split == "all":
        splits = Splits(len(ds), 0, 0)
    trainer = Trainer(ds, TrainConfig(**{**tcfg.__dict__, "splits": splits}), stats)
    metrics = trainer.evaluate(params, "train" if args.split == "all" else args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    result = out / f"eval_{args.split}.json"
    result.write_text(json.dumps({"split": args.split, "model": kind, **metrics}, indent=2, sort_keys=True))
    io.write_manifest(out / f"eval_{args.split}.manifest.json", "eval",
                      {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split},
                      [tcfg.seed], [result], time.perf_counter() - start)
    _print({"split": args.split, **metrics})
    return 0


# -- uq ---------------------------------------------------------------------------------
def cmd_uq(args) -> int:
    start = time.perf_counter()
    generator = {"grid": args.grid, "steps": args.steps, "pvi": args.pvi,
                 "correlation_length": args.corr_len, "log_std": args.log_std,
                 "pressure_updates": args.pressure_updates}
    fluids, horizon = FluidProps(), 1.0
    predictor = None
    if args.source == "surrogate":
        if not args.checkpoint:
            raise UsageError("--source surrogate requires --checkpoint")
        kind, params, mcfg, _, stats, header = load_model(args.checkpoint)
        data = header.get("data", {})
        generator.update({k: data["generator"][k] for k in generator if k in data.get("generator", {})})
        fluids = FluidProps(**data["fluids"]) if "fluids" in data else fluids
        horizon = data.get("horizon", horizon)
        predictor = uq.surrogate_predictor(kind, params, mcfg, stats, args.field)
    grid, steps = generator["grid"], generator["steps"]
    t = steps // 2 if args.t is None else args.t
    if not 0 <= t < steps:
        raise UsageError(f"--t must lie in 0..{steps - 1}")

    wells = WellSpec(pvi=generator["pvi"], horizon=horizon)
    seeds = sample_seeds(args.seed, args.n)
    perms = [generate_permeability(grid, grid, generator["correlation_length"], generator["log_std"], s)
             for s in seeds]
    sim = uq.mcs_run(uq.SIMULATOR, perms, steps=steps, fluids=fluids, wells=wells, field=args.field,
                     pressure_updates=generator["pressure_updates"])
    result = {"source": args.source, "n": args.n, "t": t, "field": args.field,
              "simulator": {"mean_range": [float(sim.mean.min()), float(sim.mean.max())],
                            "var_min": float(sim.var.min())}}
    stats_by_name = {"sim": sim}
    if predictor is not None:
        sur = uq.mcs_run(uq.SURROGATE, perms, steps=steps, predictor=predictor, field=args.field)
        stats_by_name["surrogate"] = sur
        result["comparison"] = uq.compare_stats(sim, sur, t)

    out = Path(args.out) if args.out else io.default_output_dir() / f"uq-{args.source}"
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, st in stats_by_name.items():
        outputs += io.export_maps(st.mean[t], out / f"{name}_mean_t{t:03d}.csv")
        outputs += io.export_maps(st.var[t], out / f"{name}_var_t{t:03d}.csv")
    report = out / "uq_report.json"
    report.write_text(json.dumps(result, indent=2, sort_keys=True))
    outputs.append(report)
    io.write_manifest(out / "manifest.json", "uq", {**generator, "source": args.source, "n": args.n,
                                                     "t": t, "field": args.field,
                                                     "checkpoint": args.checkpoint},
                      seeds, outputs, time.perf_counter() - start,
                      {"comparison": result.get("comparison")})
    _print(result)
    return 0


# -- gradcheck ------------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    from .checks import gradcheck_suite
    from .tensor import inject_backward_fault

    start = time.perf_counter()
    if args.inject_fault:
        with inject_backward_fault(args.inject_fault):
            reports = gradcheck_suite(args.tol, args.seed, models=not args.primitives_only)
    else:
        reports = gradcheck_suite(args.tol, args.seed, models=not args.primitives_only)
    failed = sorted(name for name, rep in reports.items() if not rep.passed)
    summary = {name: rep.worst for name, rep in reports.items()}
    out = Path(args.out) if args.out else io.default_output_dir() / "gradcheck"
    out.mkdir(parents=True, exist_ok=True)
    result = out / "gradcheck.json"
    result.write_text(json.dumps({"tolerance": args.tol, "worst_rel_error": summary, "failed": failed},
                                 indent=2, sort_keys=True))
    io.write_manifest(out / "manifest.json", "gradcheck",
                      {"tol": args.tol, "inject_fault": args.inject_fault,
                       "primitives_only": args.primitives_only},
                      [args.seed], [result], time.perf_counter() - start)
    for name, rep in reports.items():
        print(f"{'ok  ' if rep.passed else 'FAIL'} {name:<24} max rel err {rep.worst:.3e}")
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 0 if not failed else 1


# -- export-maps ----------------------------------------------------------------------
def cmd_export_maps(args) -> int:
    start = time.perf_counter()
    ds = io.read_dataset(args.data)
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"--sample must lie in 0..{len(ds) - 1}")
    if args.checkpoint:
        if args.field == "perm":
            raise UsageError("the surrogate does not predict permeability")
        kind, params, mcfg, _, stats, _ = load_model(args.checkpoint)
        predictor = uq.surrogate_predictor(kind, params, mcfg, stats, args.field)
        frames = predictor(ds.perm[args.sample : args.sample + 1].astype(np.float64))[0]
    else:
        frames = getattr(ds, args.field)[args.sample].astype(np.float64)
    if args.t is not None:
        if frames.ndim != 3 or not 0 <= args.t < len(frames):
            raise UsageError("--t is out of range for this field")
        frames = frames[args.t]
    out = Path(args.out) if args.out else io.default_output_dir() / f"{args.field}_{args.sample}.{args.format}"
    out.parent.mkdir(parents=True, exist_ok=True)
    written = io.export_maps(frames, out, args.format, args.vmin, args.vmax)
    if args.format == "pgm":
        written += [Path(str(p) + ".json") for p in written]
    io.write_manifest(out.with_name(out.stem + ".manifest.json"), "export-maps",
                      {"data": str(args.data), "checkpoint": args.checkpoint, "sample": args.sample,
                       "field": args.field, "t": args.t, "format": args.format},
                      [], written, time.perf_counter() - start)
    _print({"written": [str(p) for p in written]})
    return 0


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowsurrogate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate a dataset of permeability realizations")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--steps", type=_positive_int, default=8)
    p.add_argument("--pvi", type=float, default=0.8, help="pore volumes injected over the horizon")
    p.add_argument("--corr-len", type=float, default=4.0)
    p.add_argument("--log-std", type=float, default=1.0)
    p.add_argument("--pressure-updates", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="dataset path (default $%s/dataset.fsd)" % io.OUTPUT_DIR_ENV)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a surrogate")
    p.add_argument("--model", choices=nets.MODEL_KINDS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="physics loss weight")
    p.add_argument("--channels", type=int, choices=(1, 2), help="1: saturation, 2: saturation+pressure")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--splits", type=_splits, help="TRAIN,VAL,TEST sample counts")
    p.add_argument("--dropout", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uq", help="Monte-Carlo moments from the simulator or a surrogate")
    p.add_argument("--source", choices=("sim", "surrogate"), required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--t", type=int, help="report step (default mid-horizon)")
    p.add_argument("--checkpoint")
    p.add_argument("--field", choices=("saturation", "pressure"), default="saturation")
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--steps", type=_positive_int, default=8)
    p.add_argument("--pvi", type=float, default=0.8)
    p.add_argument("--corr-len", type=float, default=4.0)
    p.add_argument("--log-std", type=float, default=1.0)
    p.add_argument("--pressure-updates", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--inject-fault", choices=FAULT_OPS, help="corrupt one backward rule")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitives-only", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-maps", help="write frames of one sample as CSV or PGM")
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--field", choices=io.FIELDS, default="saturation")
    p.add_argument("--t", type=int, help="single step (default all steps)")
    p.add_argument("--checkpoint", help="export the surrogate prediction instead of the data")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return USAGE_EXIT
    except FlowSurrogateError as exc:
        _emit_error(exc.category, str(exc))
        return exc.exit_code
    except OSError as exc:
        _emit_error("io", str(exc))
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
