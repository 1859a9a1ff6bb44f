"""
Command-line entry points: gen, segment, eval, suite, export-model.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation.
"""

import argparse
import logging
import sys
from typing import List, Optional

from config import configure_logging, load_settings, replace
from errors import ConfigError, SeeCoError, UsageError
from evaluation import miou
from mini_vlm import build_model, load_model, model_fingerprint, save_model
from pipeline import segment_image
from pnm import read_pgm, read_ppm, write_pgm
from scenes import gen_scene, load_categories, save_scenes, scene_seed
from scl import load_synonyms
from suite import run_suite

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(message)


def _size(text: str):
    try:
        h, w = (int(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got '{text}'")
    return h, w


def cmd_gen(args) -> int:
    H, W = args.size
    scenes = [gen_scene(scene_seed(args.seed, i), H, W, args.classes, args.texture_noise)
              for i in range(args.count)]
    save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_segment(args) -> int:
    settings = load_settings(args.config)
    model = load_model(args.model)
    categories = load_categories(args.categories)
    library = None if args.static else load_synonyms(args.synonyms, categories)
    image = read_ppm(args.image)
    labels, report = segment_image(model, image, categories, library, settings.adaptation, static=args.static)
    write_pgm(args.out, labels)
    print(f"mode = {report.mode}")
    print(f"windows = {len(report.windows)}")
    print(f"trainables = {report.trainables}")
    for i, (pre, post) in enumerate(report.losses):
        print(f"loss.{i} = {pre!r},{post!r}")
    return 0


def cmd_eval(args) -> int:
    report = miou(read_pgm(args.pred), read_pgm(args.gt), args.classes)
    sys.stdout.write(report.to_text())
    return 0


def cmd_suite(args) -> int:
    settings = load_settings(args.config)
    if args.scenes is not None:
        settings = settings.model_copy(update={'suite': replace(settings.suite, scenes=args.scenes)})
    report = run_suite(settings, args.out)
    for key, value in report.summary.items():
        print(f"{key} = {value!r}")
    return 0


def cmd_export_model(args) -> int:
    settings = load_settings(args.config)
    model = build_model(settings.model)
    save_model(model, args.out)
    print(f"sha256 = {model_fingerprint(model)}")
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='seeco', description='Test-time consensus adaptation for open-vocabulary segmentation')
    sub = parser.add_subparsers(dest='command', parser_class=ArgumentParser)

    gen = sub.add_parser('gen', help='generate synthetic scenes')
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--count', type=int, default=1)
    gen.add_argument('--classes', type=int, default=4)
    gen.add_argument('--size', type=_size, default=(224, 224))
    gen.add_argument('--texture-noise', type=float, default=0.05)
    gen.add_argument('--out', required=True)
    gen.set_defaults(func=cmd_gen)

    segment = sub.add_parser('segment', help='segment one image')
    segment.add_argument('--model', required=True)
    segment.add_argument('--image', required=True)
    segment.add_argument('--categories', required=True)
    segment.add_argument('--synonyms')
    segment.add_argument('--config')
    segment.add_argument('--out', required=True)
    segment.add_argument('--static', action='store_true')
    segment.set_defaults(func=cmd_segment)

    ev = sub.add_parser('eval', help='score a label map against ground truth')
    ev.add_argument('--pred', required=True)
    ev.add_argument('--gt', required=True)
    ev.add_argument('--classes', type=int, required=True)
    ev.set_defaults(func=cmd_eval)

    suite = sub.add_parser('suite', help='run the synthetic comparison')
    suite.add_argument('--config')
    suite.add_argument('--out', required=True)
    suite.add_argument('--scenes', type=int)
    suite.set_defaults(func=cmd_suite)

    export = sub.add_parser('export-model', help='write the seeded backbone weights')
    export.add_argument('--config')
    export.add_argument('--out', required=True)
    export.set_defaults(func=cmd_export_model)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.command == 'segment' and not args.static and not args.synonyms:
            raise UsageError("--synonyms is required unless --static is given")
        return args.func(args)
    except SeeCoError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return ConfigError.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}", exc_info=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
