"""Multi-label evaluation: average precision, pseudo-label files, and
ground-truth adapters for plain JSON, VOC-style XML, and COCO-style JSON.
"""

import json
import logging
import os
import xml.etree.ElementTree as ElementTree
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError, SchemaError

log = logging.getLogger(__name__)


@dataclass
class PredictionTable:
    """Per-image score vectors over a fixed class list, plus positive sets."""
    class_names: tuple[str, ...]
    scores: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (C,)
    positives: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def add(self, image_id: str, scores: np.ndarray,
            positive_names: tuple[str, ...]) -> None:
        if scores.shape != (len(self.class_names),):
            raise SchemaError(
                f"{image_id}: {scores.shape[0]} scores for "
                f"{len(self.class_names)} classes")
        self.scores[image_id] = np.asarray(scores, dtype=np.float64)
        self.positives[image_id] = tuple(positive_names)

    def image_ids(self) -> list[str]:
        return sorted(self.scores)


def average_precision(scores, labels) -> float:
    """AP over one class: mean of precision at each positive's rank.

    Ranking is by descending score; ties keep the original submission
    order. Raises on zero positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise SchemaError(
            f"scores {scores.shape} and labels {labels.shape} must match 1-d")
    if not labels.any():
        raise DataError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float((hits[ranked] / ranks[ranked]).mean())


def mean_average_precision(predictions: PredictionTable,
                           truth: dict[str, set[str]]
                           ) -> tuple[float, dict[str, float]]:
    """mAP over classes; zero-positive classes are skipped with a warning.

    The prediction and annotation id sets must match exactly, and every
    annotated class must appear in the prediction class list.
    """
    pred_ids = set(predictions.scores)
    truth_ids = set(truth)
    if pred_ids != truth_ids:
        missing = sorted(truth_ids - pred_ids)[:10]
        extra = sorted(pred_ids - truth_ids)[:10]
        raise DataError(
            f"image id mismatch: {len(truth_ids - pred_ids)} annotated but "
            f"unpredicted {missing}, {len(pred_ids - truth_ids)} predicted but "
            f"unannotated {extra}")
    known = set(predictions.class_names)
    for image_id, names in truth.items():
        unknown = set(names) - known
        if unknown:
            raise DataError(
                f"{image_id}: annotated classes not in class list: {sorted(unknown)}")

    ids = sorted(pred_ids)
    per_class: dict[str, float] = {}
    for c, name in enumerate(predictions.class_names):
        labels = [name in truth[i] for i in ids]
        if not any(labels):
            log.warning("class %r has no positives; skipped from the mean", name)
            continue
        scores = [float(predictions.scores[i][c]) for i in ids]
        per_class[name] = average_precision(scores, labels)
    if not per_class:
        raise DataError("no class has positives; mAP undefined")
    return float(np.mean(list(per_class.values()))), per_class


def export_pseudo_labels(predictions: PredictionTable, path) -> None:
    """One JSON record per line, ordered by image id; tags ordered by class."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in predictions.image_ids():
            scores = predictions.scores[image_id]
            positives = set(predictions.positives[image_id])
            record = {
                "image": image_id,
                "tags": [{"class": name, "score": float(scores[c])}
                         for c, name in enumerate(predictions.class_names)
                         if name in positives],
                "scores": [float(s) for s in scores],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def parse_pseudo_labels(path, class_names) -> PredictionTable:
    """Read a pseudo-label JSONL file back into a prediction table."""
    class_names = tuple(class_names)
    table = PredictionTable(class_names=class_names)
    known = set(class_names)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read predictions {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        if not isinstance(record, dict) or not {"image", "tags", "scores"} <= set(record):
            raise SchemaError(f"{path}:{lineno}: record needs image/tags/scores")
        image_id = record["image"]
        scores = record["scores"]
        if not isinstance(scores, list) or len(scores) != len(class_names):
            raise SchemaError(
                f"{path}:{lineno}: expected {len(class_names)} scores")
        names = []
        for tag in record["tags"]:
            if not isinstance(tag, dict) or "class" not in tag:
                raise SchemaError(f"{path}:{lineno}: malformed tag entry")
            if tag["class"] not in known:
                raise SchemaError(
                    f"{path}:{lineno}: unknown tag class {tag['class']!r}")
            names.append(tag["class"])
        if image_id in table.scores:
            raise SchemaError(f"{path}:{lineno}: duplicate image id {image_id!r}")
        table.add(image_id, np.asarray(scores, dtype=np.float64), tuple(names))
    return table


def write_eval_report(path, map_value: float, per_class: dict[str, float],
                      num_images: int) -> None:
    """Machine-readable evaluation summary."""
    report = {
        "map": float(map_value),
        "per_class": {name: float(per_class[name]) for name in sorted(per_class)},
        "images": int(num_images),
        "classes_scored": len(per_class),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_eval_report(path) -> dict:
    """Parse a report written by ``write_eval_report``; validates the schema."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read report {path}: {exc}") from exc
    required = {"map", "per_class", "images", "classes_scored"}
    if not isinstance(raw, dict) or not required <= set(raw):
        raise SchemaError(f"report {path} lacks required fields {sorted(required)}")
    if not isinstance(raw["per_class"], dict):
        raise SchemaError(f"report {path}: per_class must be an object")
    return raw


def load_truth_json(path) -> dict[str, set[str]]:
    """Plain mapping file: {"image id": ["class", ...], ...}."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read annotations {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: expected an object of image id -> class list")
    truth = {}
    for image_id, names in raw.items():
        if not isinstance(names, list) or any(not isinstance(n, str) for n in names):
            raise SchemaError(f"{path}: classes for {image_id!r} must be strings")
        truth[str(image_id)] = set(names)
    return truth


def load_truth_voc_dir(path) -> dict[str, set[str]]:
    """Directory of VOC-style XML files; object names become labels."""
    files = sorted(f for f in os.listdir(path) if f.endswith(".xml"))
    if not files:
        raise DataError(f"no XML annotation files under {path}")
    truth = {}
    for fname in files:
        full = os.path.join(path, fname)
        try:
            root = ElementTree.parse(full).getroot()
        except ElementTree.ParseError as exc:
            raise ParseError(f"cannot parse {full}: {exc}") from exc
        names = {obj.findtext("name", "").strip()
                 for obj in root.iter("object")}
        names.discard("")
        truth[os.path.splitext(fname)[0]] = names
    return truth


def load_truth_coco(path) -> dict[str, set[str]]:
    """COCO-style instances JSON; image file stems become image ids."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read annotations {path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise SchemaError(f"{path}: missing {key!r} section")
    categories = {c["id"]: c["name"] for c in raw["categories"]}
    ids = {}
    for image in raw["images"]:
        stem = os.path.splitext(image.get("file_name", str(image["id"])))[0]
        ids[image["id"]] = stem
    truth: dict[str, set[str]] = {stem: set() for stem in ids.values()}
    for ann in raw["annotations"]:
        if ann["image_id"] not in ids or ann["category_id"] not in categories:
            raise SchemaError(f"{path}: annotation references unknown image or "
                              f"category: {ann}")
        truth[ids[ann["image_id"]]].add(categories[ann["category_id"]])
    return truth


def load_truth(path) -> dict[str, set[str]]:
    """Dispatch on the annotation source: directory of XML, COCO JSON, or
    a plain id-to-classes JSON object."""
    if os.path.isdir(path):
        return load_truth_voc_dir(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read annotations {path}: {exc}") from exc
    if isinstance(raw, dict) and {"images", "annotations", "categories"} <= set(raw):
        return load_truth_coco(path)
    return load_truth_json(path)
