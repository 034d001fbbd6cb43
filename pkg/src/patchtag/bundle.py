"""Portable container for frozen encoder weights, config, and vocabulary.

On-disk layout: an 8-byte little-endian unsigned header length, then that
many bytes of UTF-8 JSON mapping tensor name to ``{dtype, shape,
data_offsets}`` (offsets are relative to the data region), plus a reserved
``__metadata__`` entry of string key/value pairs, then the raw data region.
All tensors are little-endian float32. The tokenizer vocabulary lives in
two sidecar files referenced from the metadata.
"""

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tokenizer as tok
from .errors import IntegrityError, ParseError, SchemaError
from .tokenizer import Vocabulary

HEADER_STRUCT = struct.Struct("<Q")
DTYPE = "F32"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and preprocessing constants for one encoder pair.

    Every value is data read from the bundle (or written by an exporter
    from the source checkpoint); nothing here is baked into the engine.
    """
    image_layers: int
    image_width: int
    image_heads: int
    patch_size: int
    native_grid: int
    embed_dim: int
    text_layers: int
    text_width: int
    text_heads: int
    context_length: int
    vocab_size: int
    pixel_mean: tuple[float, float, float]
    pixel_std: tuple[float, float, float]
    image_mlp_dim: int = 0
    text_mlp_dim: int = 0
    activation: str = "gelu"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.image_mlp_dim == 0:
            object.__setattr__(self, "image_mlp_dim", 4 * self.image_width)
        if self.text_mlp_dim == 0:
            object.__setattr__(self, "text_mlp_dim", 4 * self.text_width)
        if self.image_width % self.image_heads:
            raise SchemaError("image width must be divisible by the head count")
        if self.text_width % self.text_heads:
            raise SchemaError("text width must be divisible by the head count")
        if self.context_length < 2:
            raise SchemaError("context length must be at least 2")
        if self.activation not in ("gelu", "quick_gelu"):
            raise SchemaError(f"unknown activation {self.activation!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except ValueError as exc:
            raise ParseError(f"bad model config: {exc}") from exc
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - fields
        if unknown:
            raise SchemaError(f"unknown model config fields: {sorted(unknown)}")
        try:
            raw["pixel_mean"] = tuple(raw["pixel_mean"])
            raw["pixel_std"] = tuple(raw["pixel_std"])
            return cls(**raw)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"incomplete model config: {exc}") from exc


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    dtype: str
    byte_range: tuple[int, int]


def _block_shapes(prefix: str, width: int, mlp_dim: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.weight"] = (width,)
        shapes[f"{prefix}.{ln}.bias"] = (width,)
    for proj in ("q", "k", "v", "out"):
        shapes[f"{prefix}.attn.{proj}.weight"] = (width, width)
        shapes[f"{prefix}.attn.{proj}.bias"] = (width,)
    shapes[f"{prefix}.mlp.fc1.weight"] = (width, mlp_dim)
    shapes[f"{prefix}.mlp.fc1.bias"] = (mlp_dim,)
    shapes[f"{prefix}.mlp.fc2.weight"] = (mlp_dim, width)
    shapes[f"{prefix}.mlp.fc2.bias"] = (width,)
    return shapes


def required_tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name the configured architecture needs, with its shape.

    Linear weights use right-multiply layout (in_features, out_features).
    """
    w, wt = cfg.image_width, cfg.text_width
    shapes: dict[str, tuple[int, ...]] = {
        "image.patch_embed": (3 * cfg.patch_size * cfg.patch_size, w),
        "image.class_embedding": (w,),
        "image.pos_embed": (1 + cfg.native_grid ** 2, w),
        "image.ln_pre.weight": (w,),
        "image.ln_pre.bias": (w,),
        "image.ln_post.weight": (w,),
        "image.ln_post.bias": (w,),
        "image.proj": (w, cfg.embed_dim),
        "text.token_embed": (cfg.vocab_size, wt),
        "text.pos_embed": (cfg.context_length, wt),
        "text.ln_final.weight": (wt,),
        "text.ln_final.bias": (wt,),
        "text.proj": (wt, cfg.embed_dim),
        "logit_scale": (1,),
    }
    for i in range(cfg.image_layers):
        shapes.update(_block_shapes(f"image.block.{i}", w, cfg.image_mlp_dim))
    for i in range(cfg.text_layers):
        shapes.update(_block_shapes(f"text.block.{i}", wt, cfg.text_mlp_dim))
    return shapes


class WeightBundle:
    """Immutable named-tensor store plus config and vocabulary."""

    def __init__(self, path: Path, config: ModelConfig, records: dict[str, TensorRecord],
                 data: bytes, vocab: Vocabulary, metadata: dict[str, str]):
        self.path = Path(path)
        self.config = config
        self.records = records
        self.vocab = vocab
        self.metadata = metadata
        self._data = data
        self._hash: str | None = None

    def tensor(self, name: str) -> np.ndarray:
        """Decoded little-endian float32 tensor with its declared shape."""
        try:
            rec = self.records[name]
        except KeyError:
            raise KeyError(f"bundle has no tensor named {name!r}") from None
        begin, end = rec.byte_range
        arr = np.frombuffer(self._data, dtype="<f4", count=(end - begin) // 4, offset=begin)
        return arr.reshape(rec.shape)

    def tensor_names(self) -> list[str]:
        return sorted(self.records)

    @property
    def temperature(self) -> float:
        """Softmax temperature: exp of the stored learned logit scale."""
        return float(np.exp(self.tensor("logit_scale")[0]))

    def content_hash(self) -> str:
        if self._hash is None:
            digest = hashlib.sha256()
            with open(self.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    digest.update(chunk)
            self._hash = digest.hexdigest()
        return self._hash


def write_bundle(path: Path, tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> Path:
    """Serialise float32 tensors plus string metadata to the container format."""
    path = Path(path)
    header: dict[str, object] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {
            "dtype": DTYPE,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    header["__metadata__"] = dict(sorted(metadata.items()))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HEADER_STRUCT.pack(len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path


def _parse_header(raw: bytes, path: Path) -> tuple[dict, int]:
    if len(raw) < HEADER_STRUCT.size:
        raise ParseError(f"{path}: too short for a bundle header")
    (header_len,) = HEADER_STRUCT.unpack_from(raw)
    if HEADER_STRUCT.size + header_len > len(raw):
        raise ParseError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[HEADER_STRUCT.size:HEADER_STRUCT.size + header_len])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header must be a JSON object")
    return header, HEADER_STRUCT.size + header_len


def read_tensors(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Low-level container read: all tensors plus metadata, no model checks."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read container {path}: {exc}") from exc
    header, data_start = _parse_header(raw, path)
    data = raw[data_start:]
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise SchemaError(f"{path}: __metadata__ must be an object")
    tensors = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise SchemaError(f"{path}: bad record for tensor {name!r}")
        begin, end = entry["data_offsets"]
        if begin < 0 or end > len(data) or end < begin:
            raise IntegrityError(f"{path}: tensor {name!r} range exceeds data region")
        arr = np.frombuffer(data, dtype="<f4", count=(end - begin) // 4, offset=begin)
        tensors[name] = arr.reshape(tuple(entry["shape"]))
    return tensors, metadata


def load_bundle(path: Path) -> WeightBundle:
    """Load and eagerly validate a weight bundle and its vocabulary sidecars."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read bundle {path}: {exc}") from exc
    header, data_start = _parse_header(raw, path)
    data = raw[data_start:]

    metadata = header.pop("__metadata__", None)
    if not isinstance(metadata, dict):
        raise SchemaError(f"{path}: missing __metadata__ entry")
    if "model_config" not in metadata:
        raise SchemaError(f"{path}: metadata lacks model_config")
    config = ModelConfig.from_json(metadata["model_config"])

    records: dict[str, TensorRecord] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise SchemaError(f"{path}: bad record for tensor {name!r}")
        if entry["dtype"] != DTYPE:
            raise SchemaError(f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        begin, end = entry["data_offsets"]
        if not all(isinstance(d, int) and d >= 0 for d in shape):
            raise SchemaError(f"{path}: tensor {name!r} has invalid shape {shape}")
        if math.prod(shape) * 4 != end - begin:
            raise SchemaError(f"{path}: tensor {name!r} byte range does not match shape {shape}")
        if begin < 0 or end > len(data):
            raise IntegrityError(f"{path}: tensor {name!r} range [{begin}, {end}) exceeds data region")
        records[name] = TensorRecord(name=name, shape=shape, dtype=DTYPE, byte_range=(begin, end))

    spans = sorted(rec.byte_range for rec in records.values())
    for (b0, e0), (b1, _) in zip(spans, spans[1:]):
        if b1 < e0:
            raise IntegrityError(f"{path}: overlapping tensor byte ranges at offset {b1}")

    for name, shape in required_tensor_shapes(config).items():
        rec = records.get(name)
        if rec is None:
            raise SchemaError(f"{path}: required tensor {name!r} is missing")
        if rec.shape != shape:
            raise SchemaError(
                f"{path}: tensor {name!r} has shape {rec.shape}, expected {shape}")

    for key in ("vocab_encoder", "vocab_merges"):
        if key not in metadata:
            raise SchemaError(f"{path}: metadata lacks {key}")
    vocab = tok.load_vocabulary(path.parent / metadata["vocab_encoder"],
                                path.parent / metadata["vocab_merges"])
    if len(vocab) != config.vocab_size:
        raise SchemaError(
            f"{path}: vocabulary has {len(vocab)} entries, config says {config.vocab_size}")

    return WeightBundle(path=path, config=config, records=records, data=data,
                        vocab=vocab, metadata=metadata)


TOY_MERGES = [
    ("a", "b"), ("ab", "c</w>"), ("h", "e"), ("t", "h"), ("th", "e</w>"),
    ("o", "g</w>"), ("d", "og</w>"), ("he", "l"), ("hel", "l"), ("hell", "o</w>"),
]


def toy_vocabulary(merges: list[tuple[str, str]] | None = None) -> Vocabulary:
    """Byte-complete vocabulary with a handful of merges, for fixtures."""
    merges = TOY_MERGES if merges is None else merges
    symbols = list(tok.byte_symbols())
    symbols += [s + tok.WORD_END for s in tok.byte_symbols()]
    symbols += ["".join(pair) for pair in merges]
    symbols += [tok.SOT_TOKEN, tok.EOT_TOKEN]
    encoder = {s: i for i, s in enumerate(symbols)}
    if len(encoder) != len(symbols):
        raise SchemaError("merge list produces duplicate vocabulary entries")
    return Vocabulary(encoder=encoder, merges=list(merges))


def default_fixture_config() -> ModelConfig:
    return ModelConfig(
        image_layers=2, image_width=8, image_heads=2, patch_size=4, native_grid=4,
        embed_dim=8, text_layers=2, text_width=8, text_heads=2, context_length=16,
        vocab_size=len(toy_vocabulary()),
        pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5))


def generate_fixture(cfg: ModelConfig | None, seed: int, out_dir: Path) -> Path:
    """Write a deterministic random-weight bundle plus vocabulary sidecars.

    Returns the bundle file path. The vocabulary is the toy table, and
    ``cfg.vocab_size`` is overridden to match it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = toy_vocabulary()
    cfg = cfg or default_fixture_config()
    cfg = dataclasses.replace(cfg, vocab_size=len(vocab))

    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in sorted(required_tensor_shapes(cfg).items()):
        if name == "logit_scale":
            value = np.array([np.log(30.0)], dtype=np.float32)
        elif name.endswith("ln_pre.weight") or name.endswith("ln_post.weight") \
                or name.endswith("ln_final.weight") or ".ln1.weight" in name \
                or ".ln2.weight" in name:
            value = (1.0 + 0.01 * rng.standard_normal(shape)).astype(np.float32)
        elif name.endswith(".bias"):
            value = (0.01 * rng.standard_normal(shape)).astype(np.float32)
        elif "pos_embed" in name:
            value = (0.02 * rng.standard_normal(shape)).astype(np.float32)
        else:
            scale = 0.5 / np.sqrt(max(shape[-1], 1))
            value = (scale * rng.standard_normal(shape)).astype(np.float32)
        tensors[name] = value

    tok.save_vocabulary(vocab, out_dir / "vocab.json", out_dir / "merges.txt")
    metadata = {
        "model_config": cfg.to_json(),
        "vocab_encoder": "vocab.json",
        "vocab_merges": "merges.txt",
    }
    return write_bundle(out_dir / "model.bundle", tensors, metadata)
