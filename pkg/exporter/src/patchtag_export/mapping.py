"""Tensor renaming from public CLIP checkpoint layouts to the bundle scheme.

Two source layouts are handled:

* Hugging Face ``CLIPModel`` state dicts (separate q/k/v projections,
  ``vision_model.*`` / ``text_model.*`` prefixes).
* The original research release layout (packed ``attn.in_proj_*`` QKV,
  ``visual.*`` prefix, bare text tower keys).

Both store linear weights as (out_features, in_features); the bundle scheme
right-multiplies, so every linear weight is transposed on the way through.
Values are never recomputed, only reshaped, so float32 content is preserved
bit for bit.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import UnsupportedCheckpointError

# Buffers some snapshots carry that hold no weights.
_IGNORED_SUFFIXES = (".position_ids",)


def _copy(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.astype(np.float32))


def _linear(arr: np.ndarray) -> np.ndarray:
    # torch Linear stores (out, in); bundle layout is (in, out)
    return np.ascontiguousarray(arr.astype(np.float32).T)


def _patchify_filter(arr: np.ndarray) -> np.ndarray:
    # conv filter (out, c, ky, kx); rows flatten channel-major, matching
    # the order patch pixels are unrolled at inference time
    flat = arr.astype(np.float32).reshape(arr.shape[0], -1)
    return np.ascontiguousarray(flat.T)


def _scalar(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).reshape(1)


def _check_coverage(state: dict, expected: list[str], layout: str) -> None:
    present = {k for k in state if not k.endswith(_IGNORED_SUFFIXES)}
    missing = sorted(set(expected) - present)
    extra = sorted(present - set(expected))
    if missing or extra:
        parts = [f"state dict does not match the {layout} layout"]
        if missing:
            parts.append("expected tensors not found: " + ", ".join(missing))
        if extra:
            parts.append("unrecognized tensors: " + ", ".join(extra))
        raise UnsupportedCheckpointError("; ".join(parts))


def count_indexed_layers(state: dict, prefix: str) -> int:
    """Number of consecutive transformer blocks under ``prefix.{i}.``."""
    pattern = re.compile(re.escape(prefix) + r"\.(\d+)\.")
    indices = {int(m.group(1)) for k in state if (m := pattern.match(k))}
    if not indices or indices != set(range(len(indices))):
        raise UnsupportedCheckpointError(
            f"no contiguous block stack found under {prefix!r}")
    return len(indices)


def _hf_block_entries(src: str, dst: str) -> list[tuple[str, str, object]]:
    entries = []
    for ln_src, ln_dst in (("layer_norm1", "ln1"), ("layer_norm2", "ln2")):
        for part in ("weight", "bias"):
            entries.append((f"{src}.{ln_src}.{part}", f"{dst}.{ln_dst}.{part}", _copy))
    for proj_src, proj_dst in (("q_proj", "q"), ("k_proj", "k"),
                               ("v_proj", "v"), ("out_proj", "out")):
        entries.append((f"{src}.self_attn.{proj_src}.weight",
                        f"{dst}.attn.{proj_dst}.weight", _linear))
        entries.append((f"{src}.self_attn.{proj_src}.bias",
                        f"{dst}.attn.{proj_dst}.bias", _copy))
    for fc in ("fc1", "fc2"):
        entries.append((f"{src}.mlp.{fc}.weight", f"{dst}.mlp.{fc}.weight", _linear))
        entries.append((f"{src}.mlp.{fc}.bias", f"{dst}.mlp.{fc}.bias", _copy))
    return entries


def hf_tensor_table(image_layers: int, text_layers: int,
                    pre_norm_key: str) -> list[tuple[str, str, object]]:
    """(source key, bundle key, transform) triples for the HF layout."""
    table = [
        ("vision_model.embeddings.patch_embedding.weight",
         "image.patch_embed", _patchify_filter),
        ("vision_model.embeddings.class_embedding",
         "image.class_embedding", _copy),
        ("vision_model.embeddings.position_embedding.weight",
         "image.pos_embed", _copy),
        (f"{pre_norm_key}.weight", "image.ln_pre.weight", _copy),
        (f"{pre_norm_key}.bias", "image.ln_pre.bias", _copy),
        ("vision_model.post_layernorm.weight", "image.ln_post.weight", _copy),
        ("vision_model.post_layernorm.bias", "image.ln_post.bias", _copy),
        ("visual_projection.weight", "image.proj", _linear),
        ("text_model.embeddings.token_embedding.weight",
         "text.token_embed", _copy),
        ("text_model.embeddings.position_embedding.weight",
         "text.pos_embed", _copy),
        ("text_model.final_layer_norm.weight", "text.ln_final.weight", _copy),
        ("text_model.final_layer_norm.bias", "text.ln_final.bias", _copy),
        ("text_projection.weight", "text.proj", _linear),
        ("logit_scale", "logit_scale", _scalar),
    ]
    for i in range(image_layers):
        table.extend(_hf_block_entries(f"vision_model.encoder.layers.{i}",
                                       f"image.block.{i}"))
    for i in range(text_layers):
        table.extend(_hf_block_entries(f"text_model.encoder.layers.{i}",
                                       f"text.block.{i}"))
    return table


def detect_hf_pre_norm_key(state: dict) -> str:
    # the historical misspelling is load-bearing in some snapshots
    for key in ("vision_model.pre_layrnorm", "vision_model.pre_layernorm"):
        if f"{key}.weight" in state:
            return key
    raise UnsupportedCheckpointError(
        "expected tensors not found: vision_model.pre_layrnorm.weight "
        "or vision_model.pre_layernorm.weight")


def convert_hf_tensors(state: dict[str, np.ndarray], image_layers: int,
                       text_layers: int) -> dict[str, np.ndarray]:
    """Rename an HF CLIP state dict into bundle tensors."""
    table = hf_tensor_table(image_layers, text_layers,
                            detect_hf_pre_norm_key(state))
    _check_coverage(state, [src for src, _, _ in table], "CLIP")
    return {dst: fn(state[src]) for src, dst, fn in table}


def _research_block_entries(src: str, dst: str) -> list[tuple[str, str, object]]:
    entries = []
    for ln_src, ln_dst in (("ln_1", "ln1"), ("ln_2", "ln2")):
        for part in ("weight", "bias"):
            entries.append((f"{src}.{ln_src}.{part}", f"{dst}.{ln_dst}.{part}", _copy))
    entries.append((f"{src}.attn.out_proj.weight", f"{dst}.attn.out.weight", _linear))
    entries.append((f"{src}.attn.out_proj.bias", f"{dst}.attn.out.bias", _copy))
    for fc_src, fc_dst in (("c_fc", "fc1"), ("c_proj", "fc2")):
        entries.append((f"{src}.mlp.{fc_src}.weight", f"{dst}.mlp.{fc_dst}.weight", _linear))
        entries.append((f"{src}.mlp.{fc_src}.bias", f"{dst}.mlp.{fc_dst}.bias", _copy))
    return entries


def research_tensor_table(image_layers: int,
                          text_layers: int) -> list[tuple[str, str, object]]:
    """Non-packed (source key, bundle key, transform) triples.

    Packed ``attn.in_proj_*`` keys are handled separately because each one
    expands into three bundle tensors.
    """
    table = [
        ("visual.conv1.weight", "image.patch_embed", _patchify_filter),
        ("visual.class_embedding", "image.class_embedding", _copy),
        ("visual.positional_embedding", "image.pos_embed", _copy),
        ("visual.ln_pre.weight", "image.ln_pre.weight", _copy),
        ("visual.ln_pre.bias", "image.ln_pre.bias", _copy),
        ("visual.ln_post.weight", "image.ln_post.weight", _copy),
        ("visual.ln_post.bias", "image.ln_post.bias", _copy),
        # already stored right-multiply in this layout
        ("visual.proj", "image.proj", _copy),
        ("token_embedding.weight", "text.token_embed", _copy),
        ("positional_embedding", "text.pos_embed", _copy),
        ("ln_final.weight", "text.ln_final.weight", _copy),
        ("ln_final.bias", "text.ln_final.bias", _copy),
        ("text_projection", "text.proj", _copy),
        ("logit_scale", "logit_scale", _scalar),
    ]
    for i in range(image_layers):
        table.extend(_research_block_entries(
            f"visual.transformer.resblocks.{i}", f"image.block.{i}"))
    for i in range(text_layers):
        table.extend(_research_block_entries(
            f"transformer.resblocks.{i}", f"text.block.{i}"))
    return table


def _split_packed_qkv(state: dict, src: str, dst: str,
                      out: dict[str, np.ndarray]) -> None:
    weight = state[f"{src}.attn.in_proj_weight"]
    bias = state[f"{src}.attn.in_proj_bias"]
    width = weight.shape[1]
    if weight.shape != (3 * width, width) or bias.shape != (3 * width,):
        raise UnsupportedCheckpointError(
            f"{src}.attn.in_proj_weight has shape {weight.shape}, "
            f"expected ({3 * width}, {width})")
    for k, name in enumerate(("q", "k", "v")):
        rows = slice(k * width, (k + 1) * width)
        out[f"{dst}.attn.{name}.weight"] = _linear(weight[rows])
        out[f"{dst}.attn.{name}.bias"] = _copy(bias[rows])


def convert_research_tensors(state: dict[str, np.ndarray], image_layers: int,
                             text_layers: int) -> dict[str, np.ndarray]:
    """Rename a research-release CLIP state dict into bundle tensors."""
    table = research_tensor_table(image_layers, text_layers)
    packed = []
    for i in range(image_layers):
        packed.append((f"visual.transformer.resblocks.{i}", f"image.block.{i}"))
    for i in range(text_layers):
        packed.append((f"transformer.resblocks.{i}", f"text.block.{i}"))
    expected = [src for src, _, _ in table]
    for src, _ in packed:
        expected.extend((f"{src}.attn.in_proj_weight", f"{src}.attn.in_proj_bias"))
    _check_coverage(state, expected, "research-release CLIP")
    out = {dst: fn(state[src]) for src, dst, fn in table}
    for src, dst in packed:
        _split_packed_qkv(state, src, dst, out)
    return out
