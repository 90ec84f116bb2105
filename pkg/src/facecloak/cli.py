"""Command line entry point.

Exit codes: 0 ok, 1 internal failure, 2 config or input error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .config import RunConfig, load_config

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config (JSON); built-in desk defaults when omitted")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels (default: from config)")
    p.add_argument("--out-dir", help="run directory (default: paths.out_dir from the config)")
    p.add_argument("--data-root", help=f"dataset directory (default: ${pl.DATA_ROOT_ENV} or <out-dir>/data)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facecloak", description="Train and evaluate generative face-cloaking models.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth-data": "render the synthetic face dataset",
        "train-embedder": "train and calibrate the verification embedders",
        "train-attack": "train the cloaking generator",
        "distill": "distil the cloaker into a small U-Net",
        "evaluate": "write eval/report.json",
        "visualize": "t-SNE of original, cloaked and target embeddings",
        "cloak": "cloak a single PNG",
        "pipeline": "run every stage end to end",
    }
    cmds = {}
    for name, text in helps.items():
        cmds[name] = sub.add_parser(name, help=text, description=text)
        _common(cmds[name])
    cmds["train-embedder"].add_argument("--which", choices=["white", "black", "both"], default="both")
    c = cmds["cloak"]
    c.add_argument("--in", dest="input", required=True, help="input PNG, sized for the model")
    c.add_argument("--out", dest="output", required=True, help="output PNG")
    c.add_argument("--student", action="store_true", help="use the distilled student instead of the teacher")
    c.add_argument("--threshold", type=float, help="projection threshold (default: attack.threshold)")
    cmds["pipeline"].add_argument("--no-visualize", action="store_true", help="skip the t-SNE stage")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic is not None:
        updates["deterministic"] = args.deterministic
    if updates:
        cfg = cfg.model_copy(update=updates)
    return cfg.resolved()


def _run(args, cfg: RunConfig) -> int:
    paths = pl.run_paths(cfg, args.out_dir, args.data_root)
    cmd = args.command
    if cmd == "synth-data":
        print(pl.synth_data(cfg, paths))
    elif cmd == "train-embedder":
        which = ("white", "black") if args.which == "both" else (args.which,)
        print(json.dumps(pl.train_embedders(cfg, paths, which), indent=2))
    elif cmd == "train-attack":
        rep = pl.train_attack_stage(cfg, paths)
        print(f"trained {len(rep['epoch_seconds'])} epochs, mean {rep['mean_epoch_seconds']:.2f} s/epoch")
    elif cmd == "distill":
        rep = pl.distill_stage(cfg, paths)
        print(json.dumps({k: rep[k] for k in ("teacher_parameters", "student_parameters", "parameter_ratio",
                                              "success")}, indent=2))
    elif cmd == "evaluate":
        rep = pl.evaluate_stage(cfg, paths)
        for name, row in rep["models"].items():
            print(f"{name}: white {row['success_rate_whitebox']:.3f} black {row['success_rate_blackbox']:.3f} "
                  f"blurred {row['success_rate_whitebox_blurred']:.3f} ssim {row['ssim']['mean']:.3f}")
    elif cmd == "visualize":
        print(json.dumps(pl.visualize_stage(cfg, paths), indent=2))
    elif cmd == "cloak":
        secs = pl.cloak_file(cfg, paths, args.input, args.output, args.student, args.threshold)
        print(f"{secs:.6f}")
    elif cmd == "pipeline":
        out = pl.run_pipeline(cfg, paths, visualize=not args.no_visualize)
        print(f"pipeline finished in {out['total_seconds']:.1f} s; report at {paths.eval / 'report.json'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    # argparse itself exits with 2 on usage errors
    try:
        cfg = resolve_config(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _run(args, cfg)
    except pl.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (pl.ConfigError, pl.InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("facecloak").exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
