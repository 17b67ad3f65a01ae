"""Command line interface: ``blockfall <command> [options]``."""

__all__ = ["build_parser", "main"]

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional

from . import parsers
from ._version import __version__
from .config import EvaluationConfig
from .coregister import RegistrationConfig
from .evaluation import format_table
from .pipeline import (
    coregister_images,
    evaluate_blocks,
    run_pipeline,
    train_models,
    write_scene,
)
from .synthgen import SceneSpec, generate_scene

logger = logging.getLogger("blockfall_lib")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        # usage errors are invalid input
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path, help="run manifest")
    parser.add_argument("--output-dir", type=Path, help="override output_dir")
    parser.add_argument("--workers", type=int, help="override workers")
    parser.add_argument(
        "--debug-artifacts",
        action="store_true",
        default=None,
        help="write intermediate maps",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="blockfall",
        description="Detect new block falls in co-located before/after images.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="same as --log-level DEBUG"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    coregister = commands.add_parser(
        "coregister", help="align 'before' onto 'after' tile by tile"
    )
    coregister.add_argument("--before", required=True, type=Path)
    coregister.add_argument("--after", required=True, type=Path)
    coregister.add_argument("--output-dir", required=True, type=Path)
    coregister.add_argument(
        "--tile-size", type=int, default=RegistrationConfig.tile_size
    )
    coregister.add_argument("--pixel-scale", type=float, default=0.25)
    coregister.add_argument("--workers", type=int, default=1)

    train = commands.add_parser("train", help="train the 'after' and difference models")
    train.add_argument("--config", required=True, type=Path, help="training manifest")

    detect = commands.add_parser("detect", help="detect new blocks, no scoring")
    _add_run_options(detect)

    run = commands.add_parser("run", help="detect and score against truth if given")
    _add_run_options(run)

    evaluate = commands.add_parser("evaluate", help="score a final block table")
    evaluate.add_argument("--blocks", required=True, type=Path)
    evaluate.add_argument("--truth", required=True, type=Path)
    evaluate.add_argument("--pixel-scale", type=float, default=0.25)
    evaluate.add_argument("--iou", type=float, default=EvaluationConfig.match_iou)
    evaluate.add_argument(
        "--size-split", type=float, default=EvaluationConfig.size_split_m2
    )
    evaluate.add_argument("--region", default="")
    evaluate.add_argument("--output-dir", type=Path)

    synth = commands.add_parser("synth", help="generate a synthetic scene")
    synth.add_argument("--output-dir", required=True, type=Path)
    synth.add_argument("--spec", type=Path, help="scene spec YAML")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--blocks", type=int)
    synth.add_argument("--size", type=int)
    synth.add_argument("--background")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir.resolve())
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.debug_artifacts:
        overrides["debug_artifacts"] = True
    return overrides


def _run(args: argparse.Namespace, score: bool) -> None:
    manifest = parsers.parse_manifest(args.config, _overrides(args))
    if not score:
        manifest = replace(manifest, evaluation=EvaluationConfig())
    record = run_pipeline(manifest)
    print(f"{record.counts['final_blocks']} final blocks -> {manifest.output_dir}")
    if record.metrics is not None:
        print(format_table([record.metrics]), end="")


def _synth(args: argparse.Namespace) -> None:
    spec = parsers.parse_scene_spec(args.spec) if args.spec else SceneSpec()
    changes: Dict[str, Any] = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.blocks is not None:
        changes["n_blocks"] = args.blocks
    if args.size is not None:
        changes["width"] = changes["height"] = args.size
    if args.background is not None:
        changes["background"] = args.background
    scene = generate_scene(replace(spec, **changes))
    paths = write_scene(scene, args.output_dir)
    print(f"{scene.placed} of {scene.requested} blocks -> {paths['after'].parent}")


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "coregister":
        config = RegistrationConfig(tile_size=args.tile_size)
        alignments = coregister_images(
            args.before,
            args.after,
            args.output_dir,
            config,
            args.pixel_scale,
            args.workers,
        )
        aligned = sum(alignment.aligned for alignment in alignments)
        print(f"{aligned} of {len(alignments)} tiles aligned -> {args.output_dir}")
    elif args.command == "train":
        train_models(parsers.parse_training_manifest(args.config))
    elif args.command in ("detect", "run"):
        _run(args, score=args.command == "run")
    elif args.command == "evaluate":
        config = EvaluationConfig(match_iou=args.iou, size_split_m2=args.size_split)
        report = evaluate_blocks(
            args.blocks,
            args.truth,
            args.pixel_scale,
            config,
            args.output_dir,
            args.region,
        )
        print(format_table([report], size_split_m2=args.size_split), end="")
    elif args.command == "synth":
        _synth(args)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the ``blockfall`` script.

    :returns: 0 on success, 1 on invalid input or configuration, 2 on any
        other failure.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except (ValueError, TypeError) as error:
        logger.error("%s", error)
        return EXIT_INVALID
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
