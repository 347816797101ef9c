"""Command-line entry point.

    collidernet <command> [--config PATH] [--out DIR] [--seed N] ...

Commands: simulate, build-pool, calibrate, train, evaluate, reproduce,
gradcheck.  Every file is written under ``--out``.  Exit codes: 0 success,
2 configuration error, 3 runtime or training error, 4 failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import experiment as ex
from . import gradcheck, images, scm
from .model import CausalNet

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("simulate", "build-pool", "calibrate", "train", "evaluate", "reproduce", "gradcheck")

log = logging.getLogger("collidernet")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collidernet", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults are used for missing keys)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="base seed; overrides every seed in the config")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="parallel replicates for reproduce")
    p.add_argument("--epochs", type=int, help="cap on training epochs")
    p.add_argument("--image-size", type=int, help="crop size fed to the network (51 by default)")
    p.add_argument("--n", type=int, help="simulate: draw a single cohort of this size")
    p.add_argument("--mode", choices=("causal", "biased"), default="causal", help="train: which net")
    p.add_argument("--resume", action="store_true", help="reproduce: reuse finished replicates")
    p.add_argument("--print-default-config", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-epoch progress on stderr")
    return p


def seeds_from_base(base: int) -> ex.Seeds:
    return ex.Seeds(scm=base, pool_train=base + 1, pool_val=base + 2, init=base + 3, train=base + 4)


def resolve_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = seeds_from_base(args.seed)
        overrides["baseline_noise_seed"] = args.seed + 5
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    try:
        return replace(cfg, **overrides) if overrides else cfg
    except (TypeError, ValueError) as exc:
        raise ex.ConfigError(str(exc)) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_simulate(cfg, args) -> int:
    out = args.out
    if args.n is not None:
        c = scm.sample_cohort(cfg.scm, args.n, cfg.seeds.scm, stream=0)
        c.to_csv(out / "cohort.csv")
        c.write_manifest(out / "cohort.json")
        return EXIT_OK
    for stream, name, n in ((0, "train", cfg.n_train), (1, "val", cfg.n_val)):
        c = scm.sample_cohort(cfg.scm, n, cfg.seeds.scm, stream=stream)
        c.to_csv(out / f"cohort_{name}.csv")
        c.write_manifest(out / f"cohort_{name}.json")
    return EXIT_OK


def cmd_build_pool(cfg, args) -> int:
    for name, seed in (("train", cfg.seeds.pool_train), ("val", cfg.seeds.pool_val)):
        pool = images.build_pool(cfg.pool_size, seed)
        pool.save(args.out, f"pool_{name}")
        log.info("pool %s: %d images, sha256 %s", name, len(pool), pool.digest()[:16])
    return EXIT_OK


def cmd_calibrate(cfg, args) -> int:
    data = ex.assemble_dataset(cfg)
    calib, _ = ex.calibrate_noise(cfg, data, log_path=args.out / "training_log_calibrate.csv",
                                  progress=not args.quiet)
    _write_json(args.out / "calibration.json", asdict(calib))
    print(json.dumps(asdict(calib)))
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    data = ex.assemble_dataset(cfg)
    res = ex.train(cfg, data, args.mode, log_path=args.out / f"training_log_{args.mode}.csv",
                   progress=not args.quiet)
    stem = "causalnet" if args.mode == "causal" else "biasednet"
    res.model.save(args.out, stem)
    print(f"{stem}: best epoch {res.best_epoch} of {res.epochs_run}, val loss {res.best_val.total:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    """Score nets saved by ``train`` in --out, using calibration.json from ``calibrate``."""
    try:
        causal = CausalNet.load(args.out, "causalnet")
        biased = CausalNet.load(args.out, "biasednet")
        calib = ex.NoiseCalibration(**json.loads((args.out / "calibration.json").read_text()))
    except (OSError, KeyError, TypeError) as exc:
        raise RuntimeError(f"evaluate needs train (both modes) and calibrate outputs in {args.out}: {exc}") from exc
    data = ex.assemble_dataset(cfg)
    net_rows, extras = ex.evaluate_nets(causal, biased, data)
    rows = ex.run_baselines(data.train.cohort, data.val.cohort, calib, cfg.baseline_noise_seed) + net_rows
    ex.make_report(rows, cfg, calib, args.out, extras, inputs_digest=data.digest())
    sys.stdout.write(ex.results_csv(rows))
    return EXIT_OK


def cmd_reproduce(cfg, args) -> int:
    run_dir, _ = ex.reproduce(cfg, args.replicates, args.out, jobs=args.jobs,
                                progress=not args.quiet, resume=args.resume)
    sys.stdout.write((run_dir / "aggregate.csv").read_text())
    print(f"results in {run_dir}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    t0 = time.perf_counter()
    reports = gradcheck.run_suite()
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name}: max rel error {r.max_rel_error:.3e} (tol {r.tolerance:.0e}, "
                     f"{r.entries} entries)")
    lines.append(f"elapsed {time.perf_counter() - t0:.1f}s")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    (args.out / "gradcheck.txt").write_text(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


HANDLERS = {
    "simulate": cmd_simulate, "build-pool": cmd_build_pool, "calibrate": cmd_calibrate,
    "train": cmd_train, "evaluate": cmd_evaluate, "reproduce": cmd_reproduce, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.print_default_config:
            sys.stdout.write(ex.ExperimentConfig().to_json())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("collidernet: error: a command is required", file=sys.stderr)
            return EXIT_CONFIG
        if args.n is not None and args.n < 1:
            raise ex.ConfigError("--n must be >= 1")
        if args.replicates < 1 or args.jobs < 1:
            raise ex.ConfigError("--replicates and --jobs must be >= 1")
    except (ex.ConfigError, scm.ParameterError) as exc:
        print(f"collidernet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"collidernet: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
