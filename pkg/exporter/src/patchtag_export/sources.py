"""Source checkpoint loading.

Three inputs are accepted:

* a directory holding a Hugging Face CLIP snapshot (``config.json`` plus
  weights, optionally ``preprocessor_config.json`` and tokenizer files),
* a single weights file in the research-release layout (TorchScript archive,
  pickled state dict, or safetensors),
* an already-exported ``.bundle`` file, which lets verification compare a
  bundle against itself.

Every loader returns a :class:`SourceCheckpoint`: bundle-named tensors plus
callables that embed probes through the ORIGINAL checkpoint code path, so
verification never runs the converted weights on the source side.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from patchtag import (
    ConfigError,
    ImageTensor,
    InputError,
    ModelConfig,
    TokenSequence,
    Vocabulary,
    encode_text,
    forward_standard,
    load_bundle,
    read_tensors,
)

from .errors import UnsupportedCheckpointError
from .mapping import convert_hf_tensors, convert_research_tensors, count_indexed_layers

log = logging.getLogger(__name__)

_HUB_ID = re.compile(r"^[A-Za-z0-9][\w.\-]*(/[\w.\-]+)?$")
_ACTIVATIONS = ("gelu", "quick_gelu")


@dataclass
class SourceCheckpoint:
    """A loaded checkpoint, renamed tensors plus reference embed hooks."""

    label: str
    kind: str
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    vocab: Vocabulary
    image_embed: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    text_embed: Callable[[TokenSequence], np.ndarray] = field(repr=False)


def read_vocab_files(encoder_path: Path, merges_path: Path) -> Vocabulary:
    """Read tokenizer sidecars, tolerating the ``#version`` header line."""
    try:
        encoder = json.loads(Path(encoder_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read vocabulary: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{encoder_path}: not valid JSON: {exc}") from exc
    if not isinstance(encoder, dict):
        raise ConfigError(f"{encoder_path}: expected a token-to-id object")
    try:
        lines = Path(merges_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read merges: {exc}") from exc
    merges = []
    for line in lines:
        if not line.strip() or line.startswith("#version"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{merges_path}: malformed merge line {line!r}")
        merges.append((parts[0], parts[1]))
    return Vocabulary(encoder=encoder, merges=merges)


def _parse_pixel_stats(raw, what: str) -> tuple[float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 3:
        raise ConfigError(f"{what} must be three floats, got {raw!r}")
    return tuple(float(v) for v in raw)


def _checked_activation(name: str) -> str:
    if name not in _ACTIVATIONS:
        raise UnsupportedCheckpointError(
            f"activation {name!r} is not supported; expected one of {_ACTIVATIONS}")
    return name


def _state_to_numpy(state: dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().float().numpy() for k, v in state.items()}


def _projected(features) -> np.ndarray:
    # newer transformers return a pooling output object, older a bare tensor
    pooled = getattr(features, "pooler_output", features)
    return pooled[0].numpy().astype(np.float32)


def load_source(source, *, pixel_mean=None, pixel_std=None, vocab_path=None,
                merges_path=None, image_heads=None, text_heads=None,
                activation=None) -> SourceCheckpoint:
    """Load a checkpoint by directory, file, bundle, or hub reference."""
    path = Path(source)
    if path.is_dir():
        if not (path / "config.json").exists():
            raise InputError(f"{path}: directory has no config.json")
        return _load_hf_dir(path, pixel_mean, pixel_std, vocab_path, merges_path)
    if path.is_file():
        if path.suffix == ".bundle":
            return _load_engine_bundle(path)
        return _load_research_file(path, pixel_mean, pixel_std, vocab_path,
                                   merges_path, image_heads, text_heads,
                                   activation)
    if _HUB_ID.match(str(source)):
        return _load_hf_hub(str(source), pixel_mean, pixel_std,
                            vocab_path, merges_path)
    raise InputError(f"checkpoint not found: {source}")


# -- Hugging Face snapshots --------------------------------------------------

def _load_hf_dir(path: Path, pixel_mean, pixel_std, vocab_path, merges_path):
    from transformers import CLIPModel

    try:
        model = CLIPModel.from_pretrained(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load checkpoint at {path}: {exc}") from exc

    if pixel_mean is None or pixel_std is None:
        stats = path / "preprocessor_config.json"
        if not stats.exists():
            raise ConfigError(
                f"{path}: no preprocessor_config.json; pass pixel mean and std")
        processed = json.loads(stats.read_text(encoding="utf-8"))
        if pixel_mean is None:
            pixel_mean = processed.get("image_mean")
        if pixel_std is None:
            pixel_std = processed.get("image_std")

    if vocab_path is None:
        vocab_path = path / "vocab.json"
    if merges_path is None:
        merges_path = path / "merges.txt"
    if not Path(vocab_path).exists() or not Path(merges_path).exists():
        raise ConfigError(
            f"{path}: tokenizer files missing; pass vocabulary and merges paths")
    vocab = read_vocab_files(vocab_path, merges_path)
    return _from_hf_model(model, str(path), pixel_mean, pixel_std, vocab)


def _load_hf_hub(ref: str, pixel_mean, pixel_std, vocab_path, merges_path):
    import tempfile

    from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

    try:
        model = CLIPModel.from_pretrained(ref)
        if pixel_mean is None or pixel_std is None:
            processor = CLIPImageProcessor.from_pretrained(ref)
            pixel_mean = pixel_mean or processor.image_mean
            pixel_std = pixel_std or processor.image_std
        if vocab_path is None or merges_path is None:
            tokenizer = CLIPTokenizer.from_pretrained(ref)
            with tempfile.TemporaryDirectory() as scratch:
                files = tokenizer.save_vocabulary(scratch)
                vocab = read_vocab_files(Path(files[0]), Path(files[1]))
        else:
            vocab = read_vocab_files(vocab_path, merges_path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load checkpoint {ref!r}: {exc}") from exc
    return _from_hf_model(model, ref, pixel_mean, pixel_std, vocab)


def _from_hf_model(model, label: str, pixel_mean, pixel_std,
                   vocab: Vocabulary) -> SourceCheckpoint:
    model = model.eval().float()
    vision = model.config.vision_config
    text = model.config.text_config

    if vision.hidden_act != text.hidden_act:
        raise UnsupportedCheckpointError(
            f"mixed activations {vision.hidden_act!r}/{text.hidden_act!r}")
    if vision.layer_norm_eps != text.layer_norm_eps:
        raise UnsupportedCheckpointError(
            "vision and text towers use different layer norm epsilons")
    if vision.image_size % vision.patch_size:
        raise UnsupportedCheckpointError(
            f"image size {vision.image_size} is not a multiple of "
            f"patch size {vision.patch_size}")

    config = ModelConfig(
        image_layers=vision.num_hidden_layers,
        image_width=vision.hidden_size,
        image_heads=vision.num_attention_heads,
        patch_size=vision.patch_size,
        native_grid=vision.image_size // vision.patch_size,
        embed_dim=model.config.projection_dim,
        text_layers=text.num_hidden_layers,
        text_width=text.hidden_size,
        text_heads=text.num_attention_heads,
        context_length=text.max_position_embeddings,
        vocab_size=text.vocab_size,
        pixel_mean=_parse_pixel_stats(pixel_mean, "pixel mean"),
        pixel_std=_parse_pixel_stats(pixel_std, "pixel std"),
        image_mlp_dim=vision.intermediate_size,
        text_mlp_dim=text.intermediate_size,
        activation=_checked_activation(vision.hidden_act),
        layer_norm_eps=vision.layer_norm_eps,
    )

    state = _state_to_numpy(model.state_dict())
    tensors = convert_hf_tensors(state, config.image_layers, config.text_layers)

    def image_embed(pixels: np.ndarray) -> np.ndarray:
        planes = np.ascontiguousarray(pixels.transpose(2, 0, 1))
        with torch.no_grad():
            feats = model.get_image_features(
                pixel_values=torch.from_numpy(planes)[None])
        return _projected(feats)

    def text_embed(seq: TokenSequence) -> np.ndarray:
        ids = torch.tensor([list(seq.ids)], dtype=torch.long)
        with torch.no_grad():
            feats = model.get_text_features(input_ids=ids)
        return _projected(feats)

    return SourceCheckpoint(label=label, kind="clip_hf", tensors=tensors,
                            config=config, vocab=vocab,
                            image_embed=image_embed, text_embed=text_embed)


# -- research-release weights files ------------------------------------------

_RESEARCH_ANCHORS = (
    "visual.conv1.weight",
    "visual.class_embedding",
    "visual.positional_embedding",
    "token_embedding.weight",
    "positional_embedding",
    "text_projection",
    "logit_scale",
)


def _read_state_file(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file

        return load_file(path)
    try:
        scripted = torch.jit.load(path, map_location="cpu")
    except RuntimeError:
        pass
    else:
        return scripted.state_dict()
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise InputError(f"cannot read weights file {path}: {exc}") from exc
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    if not isinstance(payload, dict) or not all(
            isinstance(v, torch.Tensor) for v in payload.values()):
        raise InputError(f"{path}: file does not hold a tensor state dict")
    return payload


def _heads_for(width: int, override, flag: str) -> int:
    if override is not None:
        if override <= 0 or width % override:
            raise ConfigError(
                f"{flag}={override} does not divide tower width {width}")
        return override
    # released checkpoints in this layout size heads at 64 channels each
    if width % 64 == 0:
        return width // 64
    raise ConfigError(
        f"tower width {width} has no 64-channel head split; pass {flag}")


def _load_research_file(path: Path, pixel_mean, pixel_std, vocab_path,
                        merges_path, image_heads, text_heads, activation):
    raw = {k: v.float() for k, v in _read_state_file(path).items()}
    missing = sorted(set(_RESEARCH_ANCHORS) - set(raw))
    if missing:
        raise UnsupportedCheckpointError(
            "state dict does not match the research-release CLIP layout; "
            "expected tensors not found: " + ", ".join(missing))

    conv = raw["visual.conv1.weight"]
    if conv.ndim != 4 or conv.shape[1] != 3 or conv.shape[2] != conv.shape[3]:
        raise UnsupportedCheckpointError(
            f"visual.conv1.weight has shape {tuple(conv.shape)}, expected "
            "(width, 3, patch, patch)")
    image_width, patch_size = conv.shape[0], conv.shape[2]
    positions = raw["visual.positional_embedding"].shape[0]
    grid = math.isqrt(positions - 1)
    if grid * grid + 1 != positions:
        raise UnsupportedCheckpointError(
            f"visual.positional_embedding has {positions} rows; "
            "expected a square patch grid plus one class slot")

    image_layers = count_indexed_layers(raw, "visual.transformer.resblocks")
    text_layers = count_indexed_layers(raw, "transformer.resblocks")

    if pixel_mean is None or pixel_std is None:
        raise ConfigError(
            f"{path}: raw state dicts carry no pixel statistics; "
            "pass pixel mean and std")
    if vocab_path is None or merges_path is None:
        raise ConfigError(
            f"{path}: raw state dicts carry no tokenizer files; "
            "pass vocabulary and merges paths")

    config = ModelConfig(
        image_layers=image_layers,
        image_width=image_width,
        image_heads=_heads_for(image_width, image_heads, "image heads"),
        patch_size=patch_size,
        native_grid=grid,
        embed_dim=raw["text_projection"].shape[1],
        text_layers=text_layers,
        text_width=raw["token_embedding.weight"].shape[1],
        text_heads=_heads_for(raw["token_embedding.weight"].shape[1],
                              text_heads, "text heads"),
        context_length=raw["positional_embedding"].shape[0],
        vocab_size=raw["token_embedding.weight"].shape[0],
        pixel_mean=_parse_pixel_stats(pixel_mean, "pixel mean"),
        pixel_std=_parse_pixel_stats(pixel_std, "pixel std"),
        image_mlp_dim=raw["visual.transformer.resblocks.0.mlp.c_fc.weight"].shape[0],
        text_mlp_dim=raw["transformer.resblocks.0.mlp.c_fc.weight"].shape[0],
        # this checkpoint family ships the sigmoid GELU variant
        activation=_checked_activation(activation or "quick_gelu"),
        layer_norm_eps=1e-5,
    )

    tensors = convert_research_tensors(_state_to_numpy(raw), image_layers,
                                       text_layers)
    vocab = read_vocab_files(vocab_path, merges_path)
    act = _quick_gelu if config.activation == "quick_gelu" else F.gelu

    def image_embed(pixels: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return _research_image_embed(raw, config, act, pixels)

    def text_embed(seq: TokenSequence) -> np.ndarray:
        with torch.no_grad():
            return _research_text_embed(raw, config, act, seq)

    return SourceCheckpoint(label=str(path), kind="clip_research",
                            tensors=tensors, config=config, vocab=vocab,
                            image_embed=image_embed, text_embed=text_embed)


def _quick_gelu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(1.702 * x)


def _research_tower(x: torch.Tensor, raw: dict, prefix: str, layers: int,
                    heads: int, act, eps: float,
                    attn_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Run resblocks over (seq, width) features with the packed QKV weights."""
    width = x.shape[-1]
    x = x[:, None, :]
    for i in range(layers):
        p = f"{prefix}.{i}"
        y = F.layer_norm(x, (width,), raw[f"{p}.ln_1.weight"],
                         raw[f"{p}.ln_1.bias"], eps)
        attended, _ = F.multi_head_attention_forward(
            y, y, y, width, heads,
            raw[f"{p}.attn.in_proj_weight"], raw[f"{p}.attn.in_proj_bias"],
            None, None, False, 0.0,
            raw[f"{p}.attn.out_proj.weight"], raw[f"{p}.attn.out_proj.bias"],
            training=False, need_weights=False, attn_mask=attn_mask)
        x = x + attended
        y = F.layer_norm(x, (width,), raw[f"{p}.ln_2.weight"],
                         raw[f"{p}.ln_2.bias"], eps)
        h = act(F.linear(y, raw[f"{p}.mlp.c_fc.weight"],
                         raw[f"{p}.mlp.c_fc.bias"]))
        x = x + F.linear(h, raw[f"{p}.mlp.c_proj.weight"],
                         raw[f"{p}.mlp.c_proj.bias"])
    return x[:, 0, :]


def _research_image_embed(raw, config: ModelConfig, act,
                          pixels: np.ndarray) -> np.ndarray:
    eps = config.layer_norm_eps
    width = config.image_width
    planes = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))
    grid_feats = F.conv2d(planes[None], raw["visual.conv1.weight"],
                          stride=config.patch_size)
    tokens = grid_feats.reshape(width, -1).T
    tokens = torch.cat([raw["visual.class_embedding"][None], tokens], dim=0)
    tokens = tokens + raw["visual.positional_embedding"]
    tokens = F.layer_norm(tokens, (width,), raw["visual.ln_pre.weight"],
                          raw["visual.ln_pre.bias"], eps)
    tokens = _research_tower(tokens, raw, "visual.transformer.resblocks",
                             config.image_layers, config.image_heads, act, eps)
    pooled = F.layer_norm(tokens[0], (width,), raw["visual.ln_post.weight"],
                          raw["visual.ln_post.bias"], eps)
    return (pooled @ raw["visual.proj"]).numpy().astype(np.float32)


def _research_text_embed(raw, config: ModelConfig, act,
                         seq: TokenSequence) -> np.ndarray:
    eps = config.layer_norm_eps
    width = config.text_width
    ids = torch.tensor(list(seq.ids), dtype=torch.long)
    tokens = raw["token_embedding.weight"][ids]
    tokens = tokens + raw["positional_embedding"][: tokens.shape[0]]
    mask = torch.full((tokens.shape[0], tokens.shape[0]),
                      float("-inf")).triu_(1)
    tokens = _research_tower(tokens, raw, "transformer.resblocks",
                             config.text_layers, config.text_heads, act, eps,
                             attn_mask=mask)
    pooled = F.layer_norm(tokens, (width,), raw["ln_final.weight"],
                          raw["ln_final.bias"], eps)[seq.eot_index]
    return (pooled @ raw["text_projection"]).numpy().astype(np.float32)


# -- already-exported bundles -------------------------------------------------

def _load_engine_bundle(path: Path) -> SourceCheckpoint:
    bundle = load_bundle(path)
    tensors, _ = read_tensors(path)
    tensors.pop("__metadata__", None)

    def image_embed(pixels: np.ndarray) -> np.ndarray:
        img = ImageTensor(pixels=pixels, patch_size=bundle.config.patch_size)
        return forward_standard(img, bundle)[0]

    def text_embed(seq: TokenSequence) -> np.ndarray:
        return encode_text(seq, bundle)

    return SourceCheckpoint(label=str(path), kind="bundle", tensors=tensors,
                            config=bundle.config, vocab=bundle.vocab,
                            image_embed=image_embed, text_embed=text_embed)
