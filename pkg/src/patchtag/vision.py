"""Frozen ViT image encoder with two forward modes.

The standard mode runs all transformer layers and returns the projected
class-token embedding. The dense mode runs the last layer without
attention mixing (value projection and MLP only) so the patch tokens keep
their spatial identity, and returns per-patch projected features. Both
modes capture head-averaged patch-to-patch attention maps per layer.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import kernels
from .bundle import ModelConfig, WeightBundle
from .errors import ConfigError, InputError, ShapeError

SQUARE_SIZE = 224


@dataclass(frozen=True)
class ImageTensor:
    """Channel-normalised pixels with dimensions snapped to the patch grid."""
    pixels: np.ndarray  # (H, W, 3) float32
    patch_size: int

    @property
    def grid_h(self) -> int:
        return self.pixels.shape[0] // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.pixels.shape[1] // self.patch_size


@dataclass(frozen=True)
class DenseFeatureMap:
    """Per-patch projected embeddings from the dense forward pass."""
    grid_h: int
    grid_w: int
    features: np.ndarray  # (N_p, embed_dim) float32


@dataclass(frozen=True)
class AttentionStack:
    """Head-averaged patch-to-patch attention, class token removed."""
    layers: np.ndarray  # (L, N_p, N_p) float32

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def num_patches(self) -> int:
        return self.layers.shape[1]


@dataclass
class EncodeResult:
    tokens: np.ndarray  # (1 + N_p, width) output of the final block
    attention: AttentionStack
    grid_h: int
    grid_w: int
    full_attention: np.ndarray | None = None  # (L, 1+N_p, 1+N_p) when captured
    layer_inputs: list[np.ndarray] | None = None  # block inputs when captured


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image: np.ndarray, mode: str, config: ModelConfig) -> ImageTensor:
    """Scale to [0,1], snap to the patch grid, and channel-normalise.

    ``original`` keeps the native resolution, center-cropping each side
    down to a patch multiple (tiny sides are upsampled to one patch).
    ``square`` resizes to 224x224.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise InputError(f"expected a nonzero (H, W, 3) image, got shape {image.shape}")
    p = config.patch_size
    pix = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)

    if mode == "square":
        pix = kernels.bilinear_resize(pix, SQUARE_SIZE, SQUARE_SIZE)
    elif mode == "original":
        h, w = pix.shape[:2]
        if h < p or w < p:
            pix = kernels.bilinear_resize(pix, max(h, p), max(w, p))
            h, w = pix.shape[:2]
        ch, cw = h - h % p, w - w % p
        top, left = (h - ch) // 2, (w - cw) // 2
        pix = pix[top:top + ch, left:left + cw]
    else:
        raise ConfigError(f"unknown preprocessing mode {mode!r}")

    mean = np.asarray(config.pixel_mean, dtype=np.float32)
    std = np.asarray(config.pixel_std, dtype=np.float32)
    return ImageTensor(pixels=((pix - mean) / std).astype(np.float32), patch_size=p)


def interpolate_pos_embed(bundle: WeightBundle, grid_h: int, grid_w: int) -> np.ndarray:
    """Positional embeddings for an arbitrary grid; class row kept verbatim."""
    pos = bundle.tensor("image.pos_embed")
    g = bundle.config.native_grid
    if grid_h == g and grid_w == g:
        return pos
    patch = pos[1:].reshape(g, g, -1)
    patch = kernels.bilinear_resize(patch, grid_h, grid_w).reshape(grid_h * grid_w, -1)
    return np.concatenate([pos[:1], patch], axis=0)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.matmul(x, w) + b


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _attention(y: np.ndarray, params: dict[str, np.ndarray], heads: int,
               bias: np.ndarray | None, override_probs: np.ndarray | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention over normalised tokens ``y``.

    Returns the block output and head-averaged probabilities. ``bias`` is an
    additive pre-softmax term; ``override_probs`` replaces the mixing weights
    (capture still reflects the computed softmax).
    """
    q = _split_heads(_linear(y, params["attn.q.weight"], params["attn.q.bias"]), heads)
    k = _split_heads(_linear(y, params["attn.k.weight"], params["attn.k.bias"]), heads)
    v = _split_heads(_linear(y, params["attn.v.weight"], params["attn.v.bias"]), heads)
    n, dh = y.shape[0], y.shape[1] // heads
    scale = 1.0 / np.sqrt(dh)

    mixed = np.empty((heads, n, dh), dtype=np.float64)
    prob_sum = np.zeros((n, n), dtype=np.float64)
    for h in range(heads):
        scores = (q[h].astype(np.float64) @ k[h].astype(np.float64).T) * scale
        if bias is not None:
            scores = scores + bias
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        prob_sum += probs
        weights = probs if override_probs is None else override_probs
        mixed[h] = weights @ v[h].astype(np.float64)

    out = mixed.transpose(1, 0, 2).reshape(n, heads * dh).astype(np.float32)
    out = _linear(out, params["attn.out.weight"], params["attn.out.bias"])
    return out, (prob_sum / heads).astype(np.float32)


def _mlp(y: np.ndarray, params: dict[str, np.ndarray], activation) -> np.ndarray:
    hidden = activation(_linear(y, params["mlp.fc1.weight"], params["mlp.fc1.bias"]))
    return _linear(hidden, params["mlp.fc2.weight"], params["mlp.fc2.bias"])


def _block_params(bundle: WeightBundle, tower: str, index: int) -> dict[str, np.ndarray]:
    prefix = f"{tower}.block.{index}."
    names = ["ln1.weight", "ln1.bias", "ln2.weight", "ln2.bias",
             "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
             "attn.v.weight", "attn.v.bias", "attn.out.weight", "attn.out.bias",
             "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"]
    return {n: bundle.tensor(prefix + n) for n in names}


def activation_fn(config: ModelConfig):
    return kernels.quick_gelu if config.activation == "quick_gelu" else kernels.gelu


def transformer_block(x: np.ndarray, params: dict[str, np.ndarray], heads: int,
                      eps: float, activation, bias: np.ndarray | None = None,
                      override_probs: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Pre-norm block: attention with residual, then MLP with residual."""
    y = kernels.layer_norm(x, params["ln1.weight"], params["ln1.bias"], eps)
    attn_out, probs = _attention(y, params, heads, bias, override_probs)
    x = x + attn_out
    z = kernels.layer_norm(x, params["ln2.weight"], params["ln2.bias"], eps)
    return x + _mlp(z, params, activation), probs


def value_path_block(x: np.ndarray, params: dict[str, np.ndarray], heads: int,
                     eps: float, activation, bias: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Last-layer variant that skips attention mixing on every token.

    Each token takes the value projection (and output projection) of itself
    only, then the MLP. Attention probabilities are still computed so the
    map of the skipped layer can be captured.
    """
    y = kernels.layer_norm(x, params["ln1.weight"], params["ln1.bias"], eps)
    q = _linear(y, params["attn.q.weight"], params["attn.q.bias"])
    k = _linear(y, params["attn.k.weight"], params["attn.k.bias"])
    n, width = y.shape
    dh = width // heads
    prob_sum = np.zeros((n, n), dtype=np.float64)
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    for h in range(heads):
        scores = (qh[h].astype(np.float64) @ kh[h].astype(np.float64).T) / np.sqrt(dh)
        if bias is not None:
            scores = scores + bias
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        prob_sum += e / e.sum(axis=-1, keepdims=True)

    value = _linear(y, params["attn.v.weight"], params["attn.v.bias"])
    x = x + _linear(value, params["attn.out.weight"], params["attn.out.bias"])
    z = kernels.layer_norm(x, params["ln2.weight"], params["ln2.bias"], eps)
    return x + _mlp(z, params, activation), (prob_sum / heads).astype(np.float32)


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange (H, W, 3) pixels into (N_p, 3*p*p) rows, channel-major."""
    h, w, c = pixels.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not a multiple of patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = pixels.reshape(gh, patch_size, gw, patch_size, c)
    patches = patches.transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(patches).reshape(gh * gw, c * patch_size * patch_size)


def image_patch_tokens(img: ImageTensor, bundle: WeightBundle) -> np.ndarray:
    """Patch embeddings before the class token and positional terms."""
    return kernels.matmul(patchify(img.pixels, img.patch_size),
                          bundle.tensor("image.patch_embed"))


def run_image_transformer(bundle: WeightBundle, patch_tokens: np.ndarray,
                          pos_embed: np.ndarray, grid_h: int, grid_w: int, *,
                          mask: np.ndarray | None = None, dense: bool = False,
                          mask_layers: str = "all",
                          identity_last_attention: bool = False,
                          capture_full: bool = False,
                          capture_layers: bool = False) -> EncodeResult:
    """Run the token stream through all image blocks, capturing attention.

    ``mask`` is a boolean keep-flag per patch; masked-out patches receive an
    additive minus-infinity key bias (in every layer, or only the last one
    when ``mask_layers == "last"``). ``dense`` switches the final layer to
    the value path; ``identity_last_attention`` instead forces the final
    layer's mixing weights to the identity through the regular attention
    machinery (diagnostic knob).
    """
    cfg = bundle.config
    n = patch_tokens.shape[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ShapeError(f"patch mask has shape {mask.shape}, expected ({n},)")
        if not mask.any():
            raise ConfigError("patch mask excludes every patch")
    if mask_layers not in ("all", "last"):
        raise ConfigError(f"mask_layers must be 'all' or 'last', got {mask_layers!r}")

    cls = bundle.tensor("image.class_embedding")[None, :]
    x = np.concatenate([cls, patch_tokens], axis=0) + pos_embed
    x = kernels.layer_norm(x, bundle.tensor("image.ln_pre.weight"),
                           bundle.tensor("image.ln_pre.bias"), cfg.layer_norm_eps)

    bias = None
    if mask is not None:
        bias = np.zeros((1 + n, 1 + n), dtype=np.float64)
        bias[:, 1:][:, ~mask] = -np.inf

    act = activation_fn(cfg)
    captured = []
    layer_inputs = [] if capture_layers else None
    identity = np.eye(1 + n, dtype=np.float64)
    for layer in range(cfg.image_layers):
        last = layer == cfg.image_layers - 1
        layer_bias = bias if (mask_layers == "all" or last) else None
        params = _block_params(bundle, "image", layer)
        if capture_layers:
            layer_inputs.append(x.copy())
        if dense and last:
            x, probs = value_path_block(x, params, cfg.image_heads,
                                        cfg.layer_norm_eps, act, layer_bias)
        elif identity_last_attention and last:
            x, probs = transformer_block(x, params, cfg.image_heads,
                                         cfg.layer_norm_eps, act, layer_bias,
                                         override_probs=identity)
        else:
            x, probs = transformer_block(x, params, cfg.image_heads,
                                         cfg.layer_norm_eps, act, layer_bias)
        captured.append(probs)

    full = np.stack(captured)
    return EncodeResult(tokens=x, attention=AttentionStack(layers=full[:, 1:, 1:].copy()),
                        grid_h=grid_h, grid_w=grid_w,
                        full_attention=full if capture_full else None,
                        layer_inputs=layer_inputs)


def encode_image(img: ImageTensor, bundle: WeightBundle, **kwargs) -> EncodeResult:
    gh, gw = img.grid_h, img.grid_w
    tokens = image_patch_tokens(img, bundle)
    pos = interpolate_pos_embed(bundle, gh, gw)
    return run_image_transformer(bundle, tokens, pos, gh, gw, **kwargs)


def project_tokens(bundle: WeightBundle, tokens: np.ndarray) -> np.ndarray:
    """Final layer norm plus the shared projection into the joint space."""
    normed = kernels.layer_norm(tokens, bundle.tensor("image.ln_post.weight"),
                                bundle.tensor("image.ln_post.bias"),
                                bundle.config.layer_norm_eps)
    return kernels.matmul(normed, bundle.tensor("image.proj"))


def forward_standard(img: ImageTensor, bundle: WeightBundle,
                     mask: np.ndarray | None = None, mask_layers: str = "all"
                     ) -> tuple[np.ndarray, AttentionStack]:
    """Full forward pass; returns the projected class-token embedding."""
    enc = encode_image(img, bundle, mask=mask, mask_layers=mask_layers)
    return project_tokens(bundle, enc.tokens[:1])[0], enc.attention


def forward_dense(img: ImageTensor, bundle: WeightBundle
                  ) -> tuple[DenseFeatureMap, AttentionStack]:
    """Dense forward pass; returns projected per-patch features."""
    enc = encode_image(img, bundle, dense=True)
    features = project_tokens(bundle, enc.tokens[1:])
    return DenseFeatureMap(grid_h=enc.grid_h, grid_w=enc.grid_w,
                           features=features), enc.attention
