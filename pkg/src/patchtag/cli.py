"""Command-line front end.

Subcommands: ``tag`` (images to pseudo-label JSONL plus a tag-count
figure), ``eval`` (pseudo-labels vs ground truth to an AP report with
JSON/CSV/figure artifacts), ``gen-fixture`` (deterministic toy bundle),
and ``inspect-weights`` (tensor listing).

Exit codes: 0 success, 2 usage, 3 data, 4 I/O, 5 internal. Every failure
prints one ``patchtag: error[<code>]: <reason>`` line to standard error.
Logs go to standard error; data goes to files or standard output.
"""

import argparse
import concurrent.futures
import glob
import json
import logging
import os
import sys
import tempfile

import numpy as np

from .bundle import (ModelConfig, default_fixture_config, generate_fixture,
                     load_bundle, read_tensors, write_bundle)
from .errors import InputError, PatchTagError, UsageError
from .evaluation import (PredictionTable, export_pseudo_labels, load_truth,
                         mean_average_precision, parse_pseudo_labels,
                         read_eval_report, write_eval_report)
from .pipeline import PipelineConfig, tag_image
from .text import build_classifier, default_templates, load_class_config
from .vision import load_image

log = logging.getLogger("patchtag")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_INTERNAL = 5

_CONFIG_KEYS = {
    "refine_layers", "vote_threshold", "refine_iterations", "use_refinement",
    "use_reidentification", "fuse_weight", "candidate_threshold",
    "region_threshold", "tag_threshold", "temperature", "crop_size",
    "mask_layers", "resolution",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems through our exit path."""

    def error(self, message):
        raise UsageError(message)


def load_pipeline_config(path) -> dict:
    """Read pipeline settings from a JSON object file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError(f"config {path} must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InputError(f"config {path} has unknown keys: {sorted(unknown)}")
    if "refine_layers" in raw and raw["refine_layers"] is not None:
        raw["refine_layers"] = tuple(raw["refine_layers"])
    return raw


def _parse_layer_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"--psi expects comma-separated integers: {text!r}") from exc


def _merge_pipeline_config(args) -> PipelineConfig:
    settings = load_pipeline_config(args.config) if args.config else {}
    if args.no_dmar:
        settings["use_refinement"] = False
    if args.no_cwr:
        settings["use_reidentification"] = False
    if args.fuse_weight is not None:
        settings["fuse_weight"] = args.fuse_weight
    if args.mu1 is not None:
        settings["candidate_threshold"] = args.mu1
    if args.mu2 is not None:
        settings["region_threshold"] = args.mu2
    if args.k_votes is not None:
        settings["vote_threshold"] = args.k_votes
    if args.psi is not None:
        settings["refine_layers"] = _parse_layer_list(args.psi)
    if args.resolution is not None:
        settings["resolution"] = {"original": "original", "224": "square"}[args.resolution]
    if args.temperature is not None:
        settings["temperature"] = args.temperature
    if args.crop_size is not None:
        settings["crop_size"] = args.crop_size
    if args.mask_layers is not None:
        settings["mask_layers"] = args.mask_layers
    return PipelineConfig(**settings)


def expand_inputs(patterns) -> list[str]:
    """Resolve paths and glob patterns into a sorted, deduplicated list."""
    paths = []
    for pattern in patterns:
        if glob.has_magic(pattern):
            matches = glob.glob(pattern, recursive=True)
            if not matches:
                raise UsageError(f"input pattern matched nothing: {pattern!r}")
            paths.extend(matches)
        elif os.path.exists(pattern):
            paths.append(pattern)
        else:
            raise UsageError(f"input path does not exist: {pattern!r}")
    if not paths:
        raise UsageError("no input images given")
    return sorted(dict.fromkeys(paths))


_WORKER_STATE: dict = {}


def _init_worker(bundle_path, classifier_path, classes_path, config_kwargs):
    from .text import load_class_config as load_classes
    bundle = load_bundle(bundle_path)
    tensors, _ = read_tensors(classifier_path)
    classes, _ = load_classes(classes_path)
    _WORKER_STATE.update(bundle=bundle, classifier=tensors["classifier"],
                         classes=classes,
                         config=PipelineConfig(**config_kwargs))


def _tag_one(job):
    index, path = job
    image_id = os.path.splitext(os.path.basename(path))[0]
    try:
        image = load_image(path)
        result = tag_image(image, _WORKER_STATE["bundle"],
                           _WORKER_STATE["classifier"],
                           _WORKER_STATE["classes"], _WORKER_STATE["config"])
        return (index, image_id, [float(s) for s in result.final_scores],
                list(result.tags), None)
    except PatchTagError as exc:
        return (index, image_id, None, None, str(exc))


def cmd_tag(args) -> int:
    paths = expand_inputs(args.inputs)
    if args.workers < 1:
        raise UsageError(f"--workers must be >= 1, got {args.workers}")
    config = _merge_pipeline_config(args)
    bundle = load_bundle(args.bundle)
    classes, templates = load_class_config(args.classes)
    if templates is None:
        templates = default_templates()

    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    dupes = sorted({s for s in stems if stems.count(s) > 1})
    if dupes:
        raise InputError(f"duplicate image ids from input names: {dupes}")

    log.info("building classifier for %d classes x %d templates",
             classes.total, len(templates))
    classifier = build_classifier(classes, templates, bundle,
                                  cache_dir=args.cache_dir)

    config_kwargs = {k: getattr(config, k) for k in _CONFIG_KEYS}
    results = {}
    jobs = list(enumerate(paths))
    if args.workers == 1:
        _init_worker_inline(bundle, classifier, classes, config)
        outcomes = map(_tag_one, jobs)
        for outcome in outcomes:
            results[outcome[0]] = outcome
    else:
        with tempfile.TemporaryDirectory(prefix="patchtag-") as tmp:
            classifier_path = os.path.join(tmp, "classifier.bundle")
            write_bundle(classifier_path, {"classifier": classifier},
                         {"kind": "classifier-cache"})
            with concurrent.futures.ProcessPoolExecutor(
                    max_workers=args.workers, initializer=_init_worker,
                    initargs=(args.bundle, classifier_path, args.classes,
                              config_kwargs)) as pool:
                for outcome in pool.map(_tag_one, jobs):
                    results[outcome[0]] = outcome

    table = PredictionTable(class_names=classes.foreground)
    failures = 0
    for index in range(len(paths)):
        _, image_id, scores, tags, error = results[index]
        if error is not None:
            failures += 1
            log.warning("skipping %s: %s", paths[index], error)
            continue
        table.add(image_id, np.asarray(scores, dtype=np.float64), tuple(tags))
    if failures == len(paths):
        raise InputError(f"all {failures} input images failed to process")

    export_pseudo_labels(table, args.out)
    tag_counts = [len(table.positives[i]) for i in table.image_ids()]
    from .plots import render_tag_histogram
    figure_path = os.path.splitext(args.out)[0] + ".tags.png"
    render_tag_histogram(tag_counts, figure_path)

    histogram: dict[int, int] = {}
    for count in tag_counts:
        histogram[count] = histogram.get(count, 0) + 1
    log.info("tagged %d images (%d skipped); wrote %s and %s",
             len(tag_counts), failures, args.out, figure_path)
    for count in sorted(histogram):
        log.info("  %d tags: %d images", count, histogram[count])
    return EXIT_OK


def _init_worker_inline(bundle, classifier, classes, config):
    _WORKER_STATE.update(bundle=bundle, classifier=classifier,
                         classes=classes, config=config)


def cmd_eval(args) -> int:
    classes, _ = load_class_config(args.classes)
    predictions = parse_pseudo_labels(args.preds, classes.foreground)
    truth = load_truth(args.gt)
    map_value, per_class = mean_average_precision(predictions, truth)

    for name in predictions.class_names:
        if name in per_class:
            print(f"{name:24s} {per_class[name]:.4f}")
        else:
            print(f"{name:24s} (no positives)")
    print(f"{'mAP':24s} {map_value:.4f}")

    prefix = args.out
    write_eval_report(prefix + ".json", map_value, per_class,
                      len(predictions.scores))
    with open(prefix + ".csv", "w", encoding="utf-8") as fh:
        fh.write("class,ap\n")
        for name in sorted(per_class):
            fh.write(f"{name},{per_class[name]!r}\n")
    from .plots import render_ap_chart
    render_ap_chart(per_class, map_value, prefix + ".png")
    log.info("wrote %s.json, %s.csv, %s.png", prefix, prefix, prefix)
    return EXIT_OK


def cmd_gen_fixture(args) -> int:
    overrides = {
        "image_layers": args.layers, "image_width": args.width,
        "image_heads": args.heads, "patch_size": args.patch_size,
        "native_grid": args.grid, "embed_dim": args.embed_dim,
        "text_layers": args.text_layers, "text_width": args.text_width,
        "text_heads": args.text_heads, "context_length": args.context_length,
    }
    cfg = default_fixture_config()
    supplied = {k: v for k, v in overrides.items() if v is not None}
    if supplied:
        base = json.loads(cfg.to_json())
        base.update(supplied)
        cfg = ModelConfig.from_json(json.dumps(base))
    path = generate_fixture(cfg, args.seed, args.out)
    print(path)
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    bundle = load_bundle(args.bundle)
    print(bundle.config.to_json())
    for name in bundle.tensor_names():
        shape = "x".join(str(d) for d in bundle.records[name].shape)
        print(f"{name} {shape}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchtag",
                     description="Open-vocabulary multi-label image tagging")
    sub = parser.add_subparsers(dest="command", required=True)

    tag = sub.add_parser("tag", help="tag images into a pseudo-label file")
    tag.add_argument("inputs", nargs="+", help="image paths or glob patterns")
    tag.add_argument("--bundle", required=True, help="weight bundle path")
    tag.add_argument("--classes", required=True, help="class-set JSON path")
    tag.add_argument("--config", help="pipeline-config JSON path")
    tag.add_argument("--out", required=True, help="output JSONL path")
    tag.add_argument("--workers", type=int, default=1)
    tag.add_argument("--cache-dir", help="classifier cache directory")
    tag.add_argument("--no-dmar", action="store_true",
                     help="disable attention-based score refinement")
    tag.add_argument("--no-cwr", action="store_true",
                     help="disable region reidentification")
    tag.add_argument("--lambda", dest="fuse_weight", type=float,
                     help="local weight in score fusion")
    tag.add_argument("--mu1", type=float, help="candidate threshold")
    tag.add_argument("--mu2", type=float, help="region threshold")
    tag.add_argument("--k-votes", type=int, help="attention vote threshold")
    tag.add_argument("--psi", help="comma-separated 1-based refinement layers")
    tag.add_argument("--resolution", choices=("original", "224"))
    tag.add_argument("--temperature", type=float)
    tag.add_argument("--crop-size", type=int)
    tag.add_argument("--mask-layers", choices=("all", "last"))
    tag.set_defaults(func=cmd_tag)

    ev = sub.add_parser("eval", help="score pseudo-labels against ground truth")
    ev.add_argument("--preds", required=True, help="pseudo-label JSONL path")
    ev.add_argument("--classes", required=True, help="class-set JSON path")
    ev.add_argument("--gt", required=True,
                    help="annotations: JSON map, XML directory, or COCO JSON")
    ev.add_argument("--out", required=True, help="report path prefix")
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("gen-fixture", help="write a deterministic toy bundle")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--layers", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--heads", type=int)
    gen.add_argument("--patch-size", type=int)
    gen.add_argument("--grid", type=int)
    gen.add_argument("--embed-dim", type=int)
    gen.add_argument("--text-layers", type=int)
    gen.add_argument("--text-width", type=int)
    gen.add_argument("--text-heads", type=int)
    gen.add_argument("--context-length", type=int)
    gen.set_defaults(func=cmd_gen_fixture)

    ins = sub.add_parser("inspect-weights", help="list bundle tensors and config")
    ins.add_argument("bundle", help="weight bundle path")
    ins.set_defaults(func=cmd_inspect_weights)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(f"patchtag: error[{kind}]: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except PatchTagError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except Exception as exc:  # pragma: no cover - last-resort guard
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
