"""``geost`` command line: one subcommand per pipeline stage plus ``e2e``.

Exit status: 0 on success, 1 when a stage fails (the message names the
stage), 2 for usage and configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__, pipeline
from .config import DEFAULTS, PRESETS, RunConfig, load_config, parse_config_text
from .errors import ConfigError, GeostError
from .evaluation import format_table
from .parallel import resolve_threads
from .synth import DEFECT_KINDS, SURFACES

EXIT_OK, EXIT_STAGE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config_args(p: argparse.ArgumentParser, default_preset: Optional[str] = None) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    g.add_argument("--preset", choices=sorted(PRESETS), default=default_preset,
                   help=f"named preset applied before --config (default: {default_preset or 'none'})")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    g.add_argument("--seed", type=int, help="overrides run.seed")


def _threads_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=0, metavar="N",
                   help="worker threads, 0 = one per logical core (default 0); results do not depend on N")


def _list(kind: str, allowed: Sequence[str]):
    def parse(text: str):
        items = tuple(x.strip() for x in text.split(",") if x.strip())
        bad = [x for x in items if x not in allowed]
        if not items or bad:
            raise argparse.ArgumentTypeError(f"{kind} must be a comma list of {','.join(allowed)}")
        return items
    return parse


def _limits(text: str):
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"limits must be comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("limits must lie in (0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geost", description="Student-teacher anomaly detection on point clouds.")
    parser.add_argument("--version", action="version", version=f"geost {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic defect benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, help="anomaly-free scans per surface (synth.train)")
    p.add_argument("--test", type=int, help="defective scans per surface (synth.test)")
    p.add_argument("--defects", type=_list("defects", DEFECT_KINDS), help="synth.defects")
    p.add_argument("--surfaces", type=_list("surfaces", SURFACES), help="synth.surfaces")
    p.add_argument("--resolution", type=int, help="scan side length in pixels (synth.resolution)")
    _config_args(p)

    p = sub.add_parser("gen-scenes", help="write synthetic pretraining scenes")
    p.add_argument("--out", type=Path, required=True)
    _config_args(p)
    _threads_arg(p)

    p = sub.add_parser("pretrain", help="pretrain the teacher on generated scenes")
    p.add_argument("--scenes", type=Path, required=True, help="gen-scenes output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.gst")
    _config_args(p)
    _threads_arg(p)

    p = sub.add_parser("train", help="train one student per data category")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--data", type=Path, required=True, help="synth output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--category", action="append", help="restrict to this category; repeatable")
    _config_args(p)
    _threads_arg(p)

    p = sub.add_parser("score", help="write per-point anomaly scores")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--students", type=Path, required=True,
                   help="train output directory, or one category directory holding student.gst")
    p.add_argument("--data", type=Path, help="synth output directory; scores every test scan")
    p.add_argument("--input", type=Path, nargs="+", help="individual .geoscan or .geopc files to score")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, help="sampling seed (default: the run.seed the student was trained with)")
    _threads_arg(p)

    p = sub.add_parser("eval", help="AU-PRO report from score files")
    p.add_argument("--scores", type=Path, required=True, help="score output directory")
    p.add_argument("--data", type=Path, required=True, help="synth output directory with the test scans")
    p.add_argument("--limits", type=_limits, default=DEFAULTS["eval.limits"],
                   help="comma-separated FPR integration limits (default 0.01,0.05,0.1,0.2,0.3)")
    p.add_argument("--out", type=Path, help="report CSV path (default <scores>/report.csv)")

    p = sub.add_parser("e2e", help="run every stage and print the AU-PRO table")
    p.add_argument("--out", type=Path, required=True)
    _config_args(p, default_preset="desk")
    _threads_arg(p)
    return parser


def _resolve(args, required: bool, extra: Optional[Dict] = None) -> RunConfig:
    if required and args.config is None and args.preset is None:
        raise UsageError(f"{args.command} needs --config or --preset")
    overrides: Dict = {}
    if args.overrides:
        overrides.update(parse_config_text("\n".join(args.overrides), "--set"))
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return load_config(args.config, args.preset, overrides)


def _student_dirs(root: Path) -> List[Path]:
    if (root / "student.gst").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if (d / "student.gst").exists()) if root.is_dir() else []
    if not dirs:
        raise pipeline.StageError("score", f"no student.gst under {root}")
    return dirs


def _score(args) -> List[Path]:
    if (args.data is None) == (args.input is None):
        raise UsageError("score needs exactly one of --data or --input")
    written: List[Path] = []
    for d in _student_dirs(args.students):
        if args.data is not None:
            seed = args.seed
            if seed is None:
                seed = int(pipeline.load_student(d / "student.gst", d / "stats.gst")[2]["student"]["seed"])
            written += pipeline.run_score_dir(args.teacher, d / "student.gst", d / "stats.gst", args.data,
                                              args.out, seed, args.threads)
            continue
        teacher, _ = pipeline.load_teacher(args.teacher)
        student, stats, smeta = pipeline.load_student(d / "student.gst", d / "stats.gst")
        seed = args.seed if args.seed is not None else int(smeta["student"]["seed"])
        for src in args.input:
            dst = args.out / smeta["category"] / (src.stem + ".geoscore")
            written.append(pipeline.score_file(teacher, student, stats, smeta, src, dst, seed))
    return written


def _run(args) -> int:
    cmd = args.command
    threads = resolve_threads(getattr(args, "threads", 1))
    if cmd == "synth":
        cfg = _resolve(args, False, {"synth.train": args.train, "synth.test": args.test,
                                     "synth.defects": args.defects, "synth.surfaces": args.surfaces,
                                     "synth.resolution": args.resolution})
        manifest = pipeline._staged(cmd, lambda: pipeline.run_synth(cfg, args.out))
        print(f"wrote {len(manifest['scans'])} scans to {args.out}")
    elif cmd == "gen-scenes":
        cfg = _resolve(args, True)
        m = pipeline._staged(cmd, lambda: pipeline.run_gen_scenes(cfg, args.out, threads))
        print(f"wrote {len(m['train'])} train and {len(m['val'])} val scenes to {args.out} (scale {m['scale']:.6g})")
    elif cmd == "pretrain":
        cfg = _resolve(args, True)
        path = pipeline._staged(cmd, lambda: pipeline.run_pretrain(cfg, args.scenes, args.out, threads, args.resume))
        print(f"wrote {path}")
    elif cmd == "train":
        cfg = _resolve(args, True)
        dirs = pipeline._staged(cmd, lambda: pipeline.run_train(cfg, args.teacher, args.data, args.out, threads,
                                                                 args.category))
        for cat, d in dirs.items():
            print(f"{cat}: {d / 'student.gst'}")
    elif cmd == "score":
        args.threads = threads
        written = pipeline._staged(cmd, lambda: _score(args))
        print(f"wrote {len(written)} score files to {args.out}")
    elif cmd == "eval":
        out = args.out or args.scores / "report.csv"
        table, _ = pipeline._staged(cmd, lambda: pipeline.run_eval(args.scores, args.data, args.limits, out))
        print(format_table(table, args.limits))
    elif cmd == "e2e":
        cfg = _resolve(args, False)
        table, _ = pipeline.run_e2e(cfg, args.out, threads)
        print(format_table(table, cfg.limits))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        # Parallelism comes from --threads; BLAS stays single-threaded so reductions are reproducible.
        with threadpool_limits(1):
            return _run(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"geost {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"geost: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except GeostError as exc:
        print(f"geost: stage {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
