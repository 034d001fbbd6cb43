"""Command line entry point for checkpoint export."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from patchtag import PatchTagError, UsageError

from .export import BUNDLE_NAME, export
from .sources import load_source
from .verify import verify

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_INTERNAL = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit with its own code
        raise UsageError(message)


def _parse_triple(text: str, flag: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"{flag} expects three comma-separated floats")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchtag-export",
                     description="Convert CLIP checkpoints into weight bundles")
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser("export", help="convert a checkpoint",
                              description="Write model.bundle, tokenizer "
                              "sidecars, and an export report into --out")
    cmd.add_argument("--source", required=True,
                     help="checkpoint directory, weights file, or hub id")
    cmd.add_argument("--out", required=True, help="output directory")
    cmd.add_argument("--verify", action="store_true",
                     help="compare bundle and source embeddings after export")
    cmd.add_argument("--image-probes", type=int, default=10)
    cmd.add_argument("--text-probes", type=int, default=10)
    cmd.add_argument("--probe-image", action="append", default=[],
                     metavar="PATH", help="extra image file probe (repeatable)")
    cmd.add_argument("--tolerance", type=float, default=1e-4,
                     help="max per-coordinate embedding deviation")
    cmd.add_argument("--cosine-floor", type=float, default=0.9999)
    cmd.add_argument("--pixel-mean", metavar="R,G,B",
                     help="normalization mean when the source carries none")
    cmd.add_argument("--pixel-std", metavar="R,G,B",
                     help="normalization std when the source carries none")
    cmd.add_argument("--vocab", metavar="PATH",
                     help="vocabulary JSON when the source carries none")
    cmd.add_argument("--merges", metavar="PATH",
                     help="BPE merges file when the source carries none")
    cmd.add_argument("--image-heads", type=int,
                     help="attention heads when not recorded in the source")
    cmd.add_argument("--text-heads", type=int,
                     help="attention heads when not recorded in the source")
    cmd.add_argument("--activation", choices=("gelu", "quick_gelu"),
                     help="MLP activation when not recorded in the source")
    return parser


def cmd_export(args) -> int:
    options = {
        "pixel_mean": _parse_triple(args.pixel_mean, "--pixel-mean")
        if args.pixel_mean else None,
        "pixel_std": _parse_triple(args.pixel_std, "--pixel-std")
        if args.pixel_std else None,
        "vocab_path": Path(args.vocab) if args.vocab else None,
        "merges_path": Path(args.merges) if args.merges else None,
        "image_heads": args.image_heads,
        "text_heads": args.text_heads,
        "activation": args.activation,
    }
    checkpoint = load_source(args.source, **options)
    report = export(checkpoint, args.out)
    print(f"exported {report.tensor_count} tensors "
          f"({report.total_bytes} bytes) to {args.out}")
    if not args.verify:
        return EXIT_OK
    outcome = verify(Path(args.out) / BUNDLE_NAME, checkpoint,
                     image_probes=args.image_probes,
                     text_probes=args.text_probes,
                     probe_images=args.probe_image,
                     tolerance=args.tolerance,
                     cosine_floor=args.cosine_floor)
    print(outcome.summary())
    return EXIT_OK if outcome.passed else EXIT_DATA


def _fail(kind: str, message: str) -> None:
    print(f"patchtag-export: error[{kind}]: {message}", file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return cmd_export(args)
    except UsageError as exc:
        _fail("usage", str(exc))
        return EXIT_USAGE
    except PatchTagError as exc:
        _fail("data", str(exc))
        return EXIT_DATA
    except OSError as exc:
        _fail("io", str(exc))
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - last resort
        _fail("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
