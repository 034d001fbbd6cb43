"""Numerical verification of an exported bundle against its source.

Probes are embedded twice: once by the engine reading the bundle, once by
the original checkpoint code path. Both sides consume identical inputs
(the same normalized pixel array, the same token ids), so any disagreement
is attributable to the exported weights rather than preprocessing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchtag import ConfigError, ImageTensor, encode_text, forward_standard, load_bundle, tokenize

from .sources import SourceCheckpoint, load_source

log = logging.getLogger(__name__)

PROBE_SEED = 415580

PROBE_TEXTS = (
    "a photo of a dog",
    "a photo of a cat",
    "a close-up photo of food",
    "an aerial photo of a city",
    "a blurry photo of a bicycle",
    "a painting of a horse",
    "two people riding a motorcycle",
    "a bus parked next to a wall",
    "a bird sitting on a branch",
    "a bowl of fruit on a table",
    "a night photo of an airport",
    "a child holding an umbrella",
)


@dataclass
class ProbeResult:
    """One probe compared across the bundle and the source checkpoint."""

    consumer: str  # "image encoder" or "text encoder"
    label: str
    deviation: float
    cosine: float
    passed: bool


@dataclass
class VerifyReport:
    results: tuple[ProbeResult, ...]
    tolerance: float
    cosine_floor: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_deviation(self) -> float:
        return max(r.deviation for r in self.results)

    @property
    def worst_cosine(self) -> float:
        return min(r.cosine for r in self.results)

    @property
    def failed_consumers(self) -> tuple[str, ...]:
        seen = []
        for r in self.results:
            if not r.passed and r.consumer not in seen:
                seen.append(r.consumer)
        return tuple(seen)

    def summary(self) -> str:
        if self.passed:
            return (f"verify: pass ({len(self.results)} probes, max deviation "
                    f"{self.max_deviation:.3e}, min cosine "
                    f"{self.worst_cosine:.6f})")
        failed = [r for r in self.results if not r.passed]
        lines = [(f"verify: FAIL ({len(failed)} of {len(self.results)} probes "
                  f"outside tolerance {self.tolerance:.1e}); mismatch in "
                  + " and ".join(self.failed_consumers))]
        for r in failed:
            lines.append(f"  {r.consumer} probe {r.label!r}: deviation "
                         f"{r.deviation:.3e}, cosine {r.cosine:.6f}")
        return "\n".join(lines)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 0.0 if not a.any() else 1.0
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    raw = np.dot(a.astype(np.float64), b.astype(np.float64)) / (na * nb)
    return float(min(max(raw, -1.0), 1.0))


def _compare(consumer: str, label: str, engine: np.ndarray, source: np.ndarray,
             tolerance: float, cosine_floor: float) -> ProbeResult:
    deviation = float(np.max(np.abs(engine.astype(np.float64)
                                    - source.astype(np.float64))))
    cosine = _cosine(engine, source)
    return ProbeResult(consumer=consumer, label=label, deviation=deviation,
                       cosine=cosine,
                       passed=deviation <= tolerance and cosine >= cosine_floor)


def _load_probe_file(path: Path, size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    except (OSError, UnidentifiedImageError) as exc:
        raise ConfigError(f"cannot read probe image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32) / 255.0


def verify(bundle_path, source, *, image_probes: int = 10,
           text_probes: int = 10, probe_images=(), tolerance: float = 1e-4,
           cosine_floor: float = 0.9999, **source_options) -> VerifyReport:
    """Compare bundle and source embeddings over a deterministic probe set.

    Image probes are seeded noise at the model's native input size plus any
    ``probe_images`` files; text probes come from a fixed caption list. A
    probe fails when the embeddings differ by more than ``tolerance`` in any
    coordinate or their cosine similarity drops below ``cosine_floor``.
    """
    if image_probes < 0 or text_probes < 0:
        raise ConfigError("probe counts must be non-negative")
    if text_probes > len(PROBE_TEXTS):
        raise ConfigError(
            f"at most {len(PROBE_TEXTS)} text probes are available")
    probe_images = [Path(p) for p in probe_images]
    for path in probe_images:
        if not path.is_file():
            raise ConfigError(f"probe image does not exist: {path}")
    if image_probes + text_probes + len(probe_images) == 0:
        raise ConfigError("empty probe set; nothing to verify")

    bundle = load_bundle(Path(bundle_path))
    if isinstance(source, SourceCheckpoint):
        checkpoint = source
    else:
        checkpoint = load_source(source, **source_options)

    config = bundle.config
    size = config.native_grid * config.patch_size
    mean = np.asarray(config.pixel_mean, dtype=np.float32)
    std = np.asarray(config.pixel_std, dtype=np.float32)

    raw_probes = []
    rng = np.random.default_rng(PROBE_SEED)
    for i in range(image_probes):
        raw_probes.append((f"noise {i}", rng.random((size, size, 3),
                                                    dtype=np.float32)))
    for path in probe_images:
        raw_probes.append((path.name, _load_probe_file(path, size)))

    results = []
    for label, raw in raw_probes:
        pixels = (raw - mean) / std
        engine = forward_standard(
            ImageTensor(pixels=pixels, patch_size=config.patch_size),
            bundle)[0]
        reference = checkpoint.image_embed(pixels)
        results.append(_compare("image encoder", label, engine, reference,
                                tolerance, cosine_floor))

    for text in PROBE_TEXTS[:text_probes]:
        seq = tokenize(text, bundle.vocab, config.context_length)
        engine = encode_text(seq, bundle)
        reference = checkpoint.text_embed(seq)
        results.append(_compare("text encoder", text, engine, reference,
                                tolerance, cosine_floor))

    report = VerifyReport(results=tuple(results), tolerance=tolerance,
                          cosine_floor=cosine_floor)
    log.info("%s", report.summary().splitlines()[0])
    return report
