"""Command-line entry point: ``mmdpose <command> --config run.json``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, pipeline
from .config import ConfigError, default_config, load
from .persist import CheckpointError
from .synth import ProjectionError
from .training import TrainingDiverged

log = logging.getLogger("mmdpose")


def _run_config(args):
    if args.config:
        run = load(args.config)
    elif args.seed is not None:
        run = default_config(args.seed)
    else:
        raise ConfigError("either --config or --seed is required (the seed is mandatory)")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    return run.override(**overrides) if overrides else run


def cmd_synth(run, args):
    ds = pipeline.run_synth(run)
    print(f"wrote {len(ds)} samples to {pipeline.out_path(run, 'dataset')}")


def cmd_label(run, args):
    out = pipeline.run_label(run, args.input, args.output)
    print(f"wrote FBI labels to {out}")


def cmd_train_gen(run, args):
    _, metrics = pipeline.run_train_gen(run)
    last = metrics[-1] if metrics else {}
    print(f"generator: {last}")


def cmd_finetune(run, args):
    _, _, metrics = pipeline.run_finetune(run, args.generator)
    if metrics:
        print(f"fine-tuning: out-of-domain bone deviation {metrics[-1]['bone_dev']:.3f} mm")


def cmd_train_refiner(run, args):
    modes = pipeline.refiner.MODES if args.mode == "both" else (args.mode,)
    for mode in modes:
        _, metrics = pipeline.run_train_refiner(run, mode)
        if metrics:
            print(f"refiner[{mode}]: test MPJPE {metrics[-1]['test_mpjpe']:.3f} mm")


def _print_tables(tables):
    for tag, t in tables.items():
        print(f"{tag:>10s}  avg MPJPE {t.average:.3f} mm")


def cmd_eval(run, args):
    tables = pipeline.run_eval(run, args.ckpt or None, args.identity_stub)
    _print_tables(tables)
    print(f"wrote {pipeline.out_path(run, 'table')}")


def cmd_gradcheck(run, args):
    rows = pipeline.run_gradcheck(run)
    for r in rows:
        status = "ok" if r["passed"] else "FAIL"
        print(f"{status:4s} {r['max_rel_error']:.3e} < {r['tolerance']:.0e}  {r['component']}")
    return 0 if all(r["passed"] for r in rows) else 1


def cmd_run(run, args):
    _print_tables(pipeline.run_all(run))


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic dataset"),
    "label": (cmd_label, "FBI labels for a JSONL file of 3D poses"),
    "train-gen": (cmd_train_gen, "pre-train the generator (coarse depth + FBI heads)"),
    "finetune": (cmd_finetune, "adversarial fine-tuning of the coarse depth head"),
    "train-refiner": (cmd_train_refiner, "train the base and/or final refiner"),
    "eval": (cmd_eval, "per-action MPJPE table, figures and skeleton renders"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient report"),
    "run": (cmd_run, "synth, train-gen, finetune, train-refiner, eval"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdpose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}
    parsers["label"].add_argument("--input", required=True, help="JSONL file with one 3D pose per line")
    parsers["label"].add_argument("--output", help="output path (default: <out>/fbi_labels.jsonl)")
    parsers["finetune"].add_argument("--generator", help="pre-trained generator checkpoint")
    parsers["train-refiner"].add_argument("--mode", choices=("base", "final", "both"), default="both")
    parsers["eval"].add_argument("--ckpt", action="append", help="refiner checkpoint (repeatable)")
    parsers["eval"].add_argument("--identity-stub", action="store_true",
                                 help="add a row that predicts the ground truth (pipeline smoke check)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _run_config(args)
        code = COMMANDS[args.command][0](run, args)
    except (ConfigError, CheckpointError, ProjectionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc} (last good state kept in memory only; nothing written)", file=sys.stderr)
        return 3
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
