"""Local-to-global multi-label tagging over dense patch scores.

The stages, in order:

1. classify every patch against the text classifier (softmax over all
   classes including background),
2. refine the score map by averaging attention-transported scores over a
   window of layers, with two masks: an attention mask voted across all
   layers against per-layer means, and a per-class confidence mask voted
   against per-class column means,
3. take per-class maxima as local scores, re-identify top candidate
   regions, re-score each crop globally with non-class patches suppressed,
   and fuse local and global scores,
4. min-max normalise foreground scores and threshold at 0.5.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .bundle import WeightBundle
from .errors import ConfigError, ShapeError
from .text import ClassSet
from .vision import (AttentionStack, DenseFeatureMap, ImageTensor,
                     forward_dense, forward_standard, preprocess)


def default_refine_layers(num_layers: int) -> tuple[int, ...]:
    """Layer window used for score transport: the four before the last.

    A single-layer model has no earlier layer to draw on, so it falls back
    to its only layer.
    """
    first = max(1, num_layers - 4)
    window = tuple(range(first, num_layers))
    return window if window else (num_layers,)


def default_vote_threshold(num_layers: int) -> int:
    return math.ceil(num_layers / 2)


@dataclass(frozen=True)
class RefineConfig:
    """Attention-refinement settings.

    ``layers`` holds 1-based encoder layer indices whose attention maps
    transport patch scores; ``vote_threshold`` is the strict lower bound on
    cross-layer votes for an attention link to survive.
    """
    layers: tuple[int, ...]
    vote_threshold: int
    iterations: int = 1

    def validate(self, num_layers: int) -> None:
        if not self.layers:
            raise ConfigError("refinement needs at least one layer index")
        bad = [i for i in self.layers if not 1 <= i <= num_layers]
        if bad:
            raise ConfigError(
                f"refinement layer indices {bad} outside [1, {num_layers}]")
        if not 0 <= self.vote_threshold <= num_layers:
            raise ConfigError(
                f"vote threshold {self.vote_threshold} outside [0, {num_layers}]")
        if self.iterations < 1:
            raise ConfigError("refinement iterations must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the full tagging pipeline; None means model-derived."""
    refine_layers: tuple[int, ...] | None = None
    vote_threshold: int | None = None
    refine_iterations: int = 1
    use_refinement: bool = True
    use_reidentification: bool = True
    fuse_weight: float = 0.5  # weight on the local score
    candidate_threshold: float = 0.5  # mu1, on normalised local scores
    region_threshold: float = 0.5  # mu2, on normalised per-class patch scores
    tag_threshold: float = 0.5
    temperature: float | None = None
    crop_size: int = 224
    mask_layers: str = "all"
    resolution: str = "original"

    def refine_config(self, num_layers: int) -> RefineConfig:
        layers = self.refine_layers
        if layers is None:
            layers = default_refine_layers(num_layers)
        votes = self.vote_threshold
        if votes is None:
            votes = default_vote_threshold(num_layers)
        rc = RefineConfig(layers=tuple(layers), vote_threshold=votes,
                          iterations=self.refine_iterations)
        rc.validate(num_layers)
        return rc


@dataclass(frozen=True)
class TagResult:
    """Per-image outcome: scores for every foreground class plus tags."""
    class_names: tuple[str, ...]
    local_scores: np.ndarray  # (C,) float32, max over patches
    global_scores: np.ndarray  # (C,) float32, NaN where no crop was scored
    final_scores: np.ndarray  # (C,) float32, fused
    normalized_scores: np.ndarray  # (C,) float32 in [0, 1]
    positive: np.ndarray  # (C,) bool

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(n for n, p in zip(self.class_names, self.positive) if p)


def classify_patches(features: np.ndarray | DenseFeatureMap,
                     classifier: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax scores of every patch against every class column."""
    feats = features.features if isinstance(features, DenseFeatureMap) else features
    if feats.ndim != 2 or classifier.ndim != 2 or feats.shape[1] != classifier.shape[0]:
        raise ShapeError(
            f"features {feats.shape} do not match classifier {classifier.shape}")
    norms = np.linalg.norm(feats.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    unit = (feats / norms).astype(np.float32)
    return kernels.softmax_rows(kernels.matmul(unit, classifier), scale=temperature)


def vote_mask(attention: AttentionStack, vote_threshold: int) -> np.ndarray:
    """Links that exceed their layer's mean attention in more than
    ``vote_threshold`` layers (strict on both comparisons)."""
    maps = attention.layers.astype(np.float64)
    means = maps.mean(axis=(1, 2), keepdims=True)
    votes = (maps > means).sum(axis=0)
    return votes > vote_threshold


def class_confidence_mask(transported: np.ndarray) -> np.ndarray:
    """Patches whose transported score beats the per-class column mean."""
    scores = transported.astype(np.float64)
    return scores > scores.mean(axis=0, keepdims=True)


def refine_scores(scores: np.ndarray, attention: AttentionStack,
                  config: RefineConfig, attn_mask: np.ndarray | None = None,
                  class_mask: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Transport patch scores along masked attention, averaged over layers.

    A first pass moves scores with only the attention mask applied; the
    per-class mask is voted on that intermediate map, then a second
    transport zeroes contributions that flow from unconfident patches.
    ``attn_mask``/``class_mask`` override the voted masks when given.
    Returns the refined scores and the class mask that was used.
    """
    n = attention.num_patches
    if scores.shape[0] != n:
        raise ShapeError(
            f"score rows {scores.shape[0]} != attention patches {n}")
    config.validate(attention.num_layers)

    if attn_mask is None:
        attn_mask = vote_mask(attention, config.vote_threshold)
    masked = [attn_mask * attention.layers[i - 1].astype(np.float64)
              for i in config.layers]

    current = scores.astype(np.float64)
    used_mask = class_mask
    for _ in range(config.iterations):
        transported = sum(m @ current for m in masked) / len(masked)
        used_mask = class_mask if class_mask is not None \
            else class_confidence_mask(transported)
        current = sum(m @ (used_mask * current) for m in masked) / len(masked)
    return current.astype(np.float32), used_mask


def local_scores(scores: np.ndarray) -> np.ndarray:
    """Per-class maximum over patches."""
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ShapeError(f"expected a nonempty (N, C) score map, got {scores.shape}")
    return scores.max(axis=0)


@dataclass(frozen=True)
class ClassRegion:
    """Patches attributed to one class, and their tight bounding box."""
    keep: np.ndarray  # (N_p,) bool, at least one True
    box: tuple[int, int, int, int]  # (row0, row1, col0, col1) inclusive


def class_region(scores: np.ndarray, class_index: int, region_threshold: float,
                 grid_h: int, grid_w: int) -> ClassRegion:
    """Patches whose normalised score for the class clears the threshold.

    A flat score column degenerates to the single argmax patch so the
    region is never empty.
    """
    column = scores[:, class_index]
    if column.shape[0] != grid_h * grid_w:
        raise ShapeError(
            f"{column.shape[0]} patch scores for a {grid_h}x{grid_w} grid")
    normalized = kernels.minmax_normalize(column)
    keep = normalized >= region_threshold
    if not keep.any() or float(column.max()) == float(column.min()):
        keep = np.zeros_like(keep)
        keep[int(np.argmax(column))] = True
    grid = keep.reshape(grid_h, grid_w)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    return ClassRegion(keep=keep, box=(int(rows[0]), int(rows[-1]),
                                       int(cols[0]), int(cols[-1])))


def _resample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resample that never returns an all-false grid."""
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    out = mask[ys][:, xs]
    if not out.any():
        sy, sx = np.argwhere(mask)[0]
        ty = min(int((sy + 0.5) * out_h / h), out_h - 1)
        tx = min(int((sx + 0.5) * out_w / w), out_w - 1)
        out[ty, tx] = True
    return out


def reidentify_global(img: ImageTensor, region: ClassRegion,
                      bundle: WeightBundle, classifier: np.ndarray,
                      temperature: float, crop_size: int = 224,
                      mask_layers: str = "all") -> np.ndarray:
    """Re-score one class region with the standard encoder.

    The bounding box is cut from the preprocessed image, resized square,
    and encoded with patches outside the class mask suppressed from
    attention keys. Returns softmax scores over all classes.
    """
    p = img.patch_size
    if crop_size % p:
        raise ConfigError(f"crop size {crop_size} not a multiple of patch {p}")
    r0, r1, c0, c1 = region.box
    if r1 < r0 or c1 < c0:
        raise ShapeError(f"degenerate region box {region.box}")
    crop = img.pixels[r0 * p:(r1 + 1) * p, c0 * p:(c1 + 1) * p]
    resized = kernels.bilinear_resize(crop, crop_size, crop_size)

    grid = crop_size // p
    submask = region.keep.reshape(img.grid_h, img.grid_w)[r0:r1 + 1, c0:c1 + 1]
    mask = _resample_mask(submask, grid, grid).reshape(-1)

    crop_img = ImageTensor(pixels=resized, patch_size=p)
    embedding, _ = forward_standard(crop_img, bundle, mask=mask,
                                    mask_layers=mask_layers)
    unit = embedding / max(float(np.linalg.norm(embedding.astype(np.float64))), 1e-12)
    logits = kernels.matmul(unit[None, :].astype(np.float32), classifier)
    return kernels.softmax_rows(logits, scale=temperature)[0]


def fuse_scores(local: np.ndarray | float, global_: np.ndarray | float,
                fuse_weight: float):
    """Convex combination: weight on the local score, remainder global."""
    if not 0.0 <= fuse_weight <= 1.0:
        raise ConfigError(f"fuse weight {fuse_weight} outside [0, 1]")
    return fuse_weight * local + (1.0 - fuse_weight) * global_


def predict_tags(final_scores: np.ndarray, tag_threshold: float = 0.5
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Min-max normalise and threshold; the top class is always positive."""
    normalized = kernels.minmax_normalize(final_scores)
    positive = normalized >= tag_threshold
    positive[int(np.argmax(final_scores))] = True
    return normalized, positive


def tag_image(image: np.ndarray | ImageTensor, bundle: WeightBundle,
              classifier: np.ndarray, classes: ClassSet,
              config: PipelineConfig = PipelineConfig()) -> TagResult:
    """Run the full pipeline on one decoded image."""
    if classifier.shape != (bundle.config.embed_dim, classes.total):
        raise ShapeError(
            f"classifier shape {classifier.shape} does not match embed dim "
            f"{bundle.config.embed_dim} and {classes.total} classes")
    if config.resolution not in ("original", "square"):
        raise ConfigError(f"resolution must be 'original' or 'square', "
                          f"got {config.resolution!r}")
    if isinstance(image, ImageTensor):
        img = image
    else:
        img = preprocess(image, config.resolution, bundle.config)
    temperature = config.temperature
    if temperature is None:
        temperature = bundle.temperature

    dense, attention = forward_dense(img, bundle)
    coarse = classify_patches(dense, classifier, temperature)

    if config.use_refinement:
        refined, _ = refine_scores(coarse, attention,
                                   config.refine_config(bundle.config.image_layers))
    else:
        refined = coarse

    num_fg = classes.num_foreground
    local_all = local_scores(refined)
    local_fg = local_all[:num_fg].astype(np.float32)

    final = local_fg.copy()
    global_fg = np.full(num_fg, np.nan, dtype=np.float32)
    if config.use_reidentification:
        normalized_local = kernels.minmax_normalize(local_fg)
        candidates = set(np.flatnonzero(
            normalized_local >= config.candidate_threshold).tolist())
        candidates.add(int(np.argmax(local_fg)))
        for c in sorted(candidates):
            region = class_region(refined, c, config.region_threshold,
                                  dense.grid_h, dense.grid_w)
            scores = reidentify_global(img, region, bundle, classifier,
                                       temperature, config.crop_size,
                                       config.mask_layers)
            global_fg[c] = scores[c]
            final[c] = fuse_scores(local_fg[c], scores[c], config.fuse_weight)

    normalized, positive = predict_tags(final, config.tag_threshold)
    return TagResult(class_names=classes.foreground, local_scores=local_fg,
                     global_scores=global_fg, final_scores=final,
                     normalized_scores=normalized, positive=positive)
