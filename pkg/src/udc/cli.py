"""Command-line entry point: ``udc <subcommand> [options]``.

Every subcommand accepts ``--config``, ``--preset``, ``--set key=value``
(repeatable), ``--seed`` and ``--run-dir``. Without ``--run-dir`` the run
directory is ``$UDC_OUTPUT_ROOT/<output_dir>`` (``./runs`` when the variable is
unset). Results are printed as JSON; failures print an error object and exit
with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from udc.config import PRESETS, load_config
from udc.errors import UDCError
from udc.pipeline import SWEEPS, VARIANTS, Run, dump_embeddings, run_ablation, run_sweep

OUTPUT_ROOT_ENV = "UDC_OUTPUT_ROOT"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", default="default", choices=PRESETS)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. drl.alpha=0.5")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-dir", help="explicit run directory")
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("gen-data", "write a synthetic corpus and text embeddings"),
                            ("pretrain", "stage 1: train the collaborative model"),
                            ("train-drl", "stage 2: train the discrete representation module"),
                            ("finetune", "stage 3: substitute disease embeddings and fine-tune"),
                            ("eval", "evaluate stage 1 and the substituted model on the test split"),
                            ("pipeline", "run all stages, resuming from existing checkpoints")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name in ("finetune", "pipeline"):
            p.add_argument("--no-finetune", action="store_true",
                           help="substitute embeddings but skip fine-tuning")
    p = sub.add_parser("ablate", help="run the six ablation variants over one stage-1 checkpoint")
    _common(p)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p = sub.add_parser("sweep", help="vary one hyperparameter")
    _common(p)
    p.add_argument("--param", required=True, choices=SWEEPS)
    p.add_argument("--values", required=True, nargs="+")
    p = sub.add_parser("dump", help="write disease vectors or the codebook as CSV")
    _common(p)
    p.add_argument("--which", required=True, choices=("original", "substituted", "quantized", "codebook"))
    p.add_argument("--out", help="output CSV path (default: <run-dir>/dump_<which>.csv)")
    return parser


def resolve_run_dir(args, cfg) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / cfg.output_dir


def _setup_logging(run_dir: Path, verbose: bool) -> None:
    root = logging.getLogger("udc")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    run_dir.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(run_dir / "log.txt")
    fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root.addHandler(fh)
    if verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))


def _sweep_values(raw: list[str]) -> list:
    return [yaml.safe_load(v) for v in raw]


def execute(args) -> dict:
    overrides = list(args.overrides)
    if getattr(args, "no_finetune", False):
        overrides.append("no_finetune=true")
    cfg = load_config(args.config, args.preset, overrides, args.seed)
    run_dir = resolve_run_dir(args, cfg)
    _setup_logging(run_dir, args.verbose)
    resume = not args.fresh
    run = Run(cfg, run_dir)
    cmd = args.command
    if cmd != "dump":
        run.write_provenance()
    if cmd == "gen-data":
        return {"data_dir": str(run.gen_data(force=args.fresh))}
    if cmd == "pretrain":
        run.pretrain(resume)
        return {"checkpoint": str(run.stage1_path)}
    if cmd == "train-drl":
        run.train_drl(resume)
        return {"checkpoint": str(run.stage2_path)}
    if cmd == "finetune":
        run.finetune(resume)
        return {"checkpoint": str(run.stage3_path)}
    if cmd == "eval":
        return run.evaluate()
    if cmd == "pipeline":
        return run.run(resume)
    if cmd == "ablate":
        return {"rows": run_ablation(cfg, run_dir, args.variants)}
    if cmd == "sweep":
        return {"rows": run_sweep(cfg, run_dir, args.param, _sweep_values(args.values))}
    if cmd == "dump":
        out = Path(args.out) if args.out else run_dir / f"dump_{args.which}.csv"
        return {"path": str(dump_embeddings(run, args.which, out))}
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = execute(args)
    except UDCError as exc:
        print(json.dumps({"ok": False, "error": exc.kind, "message": str(exc)}))
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}))
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
