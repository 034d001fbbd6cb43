"""Bundle export and the accompanying report.

The report pins down what was written: tensor inventory, per-tensor SHA-256
checksums computed from the bytes on disk, the full model config, and a
reference text embedding produced by the engine from the freshly written
bundle. Re-exporting the same checkpoint yields byte-identical output, so
checksums double as a determinism probe.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

from patchtag import (
    IntegrityError,
    ParseError,
    SchemaError,
    encode_text,
    load_bundle,
    save_vocabulary,
    tokenize,
    write_bundle,
)

from .sources import SourceCheckpoint, load_source

log = logging.getLogger(__name__)

REFERENCE_PROBE = "a photo of a dog"

BUNDLE_NAME = "model.bundle"
REPORT_NAME = "export_report.json"

_REPORT_KEYS = ("source", "tensor_count", "total_bytes", "config",
                "checksums", "reference_probe", "reference_embedding")


@dataclass
class ExportReport:
    """What an export wrote, in verifiable terms."""

    source: str
    tensor_count: int
    total_bytes: int
    config: dict
    checksums: dict[str, str]
    reference_probe: str
    reference_embedding: list[float]

    def to_json(self) -> str:
        payload = {key: getattr(self, key) for key in _REPORT_KEYS}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExportReport":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"report is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or set(payload) != set(_REPORT_KEYS):
            raise SchemaError("report does not have the expected fields")
        return cls(**payload)


def read_report(path: Path) -> ExportReport:
    return ExportReport.from_json(Path(path).read_text(encoding="utf-8"))


def tensor_checksums(bundle_path: Path) -> dict[str, str]:
    """SHA-256 of each tensor's stored bytes, straight from the file."""
    blob = Path(bundle_path).read_bytes()
    if len(blob) < 8:
        raise ParseError(f"{bundle_path}: too short for a header")
    (header_len,) = struct.unpack("<Q", blob[:8])
    try:
        index = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{bundle_path}: malformed tensor index: {exc}") from exc
    base = 8 + header_len
    sums = {}
    for name, entry in index.items():
        if name == "__metadata__":
            continue
        start, stop = entry["data_offsets"]
        sums[name] = hashlib.sha256(blob[base + start:base + stop]).hexdigest()
    return sums


def export(source, out_dir, **source_options) -> ExportReport:
    """Convert a checkpoint into ``out_dir`` and describe what was written.

    Produces ``model.bundle``, ``vocab.json``, ``merges.txt``, and
    ``export_report.json``. The bundle is re-read through full validation
    before the report is written, so a successful return implies a loadable
    bundle whose checksums match the bytes on disk.
    """
    if isinstance(source, SourceCheckpoint):
        checkpoint = source
    else:
        checkpoint = load_source(source, **source_options)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    save_vocabulary(checkpoint.vocab, out_dir / "vocab.json",
                    out_dir / "merges.txt")
    bundle_path = write_bundle(out_dir / BUNDLE_NAME, checkpoint.tensors, {
        "model_config": checkpoint.config.to_json(),
        "vocab_encoder": "vocab.json",
        "vocab_merges": "merges.txt",
    })
    bundle = load_bundle(bundle_path)

    checksums = tensor_checksums(bundle_path)
    for name, arr in checkpoint.tensors.items():
        expected = hashlib.sha256(
            arr.astype("<f4", copy=False).tobytes()).hexdigest()
        if checksums.get(name) != expected:
            raise IntegrityError(
                f"{name}: stored bytes do not match the converted tensor")

    seq = tokenize(REFERENCE_PROBE, bundle.vocab,
                   bundle.config.context_length)
    reference = encode_text(seq, bundle)

    report = ExportReport(
        source=checkpoint.label,
        tensor_count=len(checkpoint.tensors),
        total_bytes=bundle_path.stat().st_size,
        config=json.loads(checkpoint.config.to_json()),
        checksums=checksums,
        reference_probe=REFERENCE_PROBE,
        reference_embedding=[float(v) for v in reference],
    )
    (out_dir / REPORT_NAME).write_text(report.to_json() + "\n",
                                       encoding="utf-8")
    log.info("exported %d tensors (%d bytes) to %s", report.tensor_count,
             report.total_bytes, out_dir)
    return report
