"""Training-free multi-label image tagging over frozen vision-language weights.

The library turns a converted contrastive checkpoint (a weight bundle plus
vocabulary sidecars) into per-image tag predictions: dense per-patch
classification, attention-guided score refinement, region
reidentification with global rescoring, and thresholded tag selection,
plus an average-precision evaluation harness.
"""

from .bundle import (ModelConfig, WeightBundle, default_fixture_config,
                     generate_fixture, load_bundle, read_tensors,
                     required_tensor_shapes, toy_vocabulary, write_bundle)
from .errors import (ConfigError, DataError, InputError, IntegrityError,
                     ParseError, PatchTagError, SchemaError, ShapeError,
                     UsageError)
from .evaluation import (PredictionTable, average_precision,
                         export_pseudo_labels, load_truth,
                         mean_average_precision, parse_pseudo_labels)
from .pipeline import (ClassRegion, PipelineConfig, RefineConfig, TagResult,
                       class_region, classify_patches, fuse_scores,
                       local_scores, predict_tags, refine_scores,
                       reidentify_global, tag_image, vote_mask)
from .text import (ClassSet, PromptTemplate, build_classifier, default_templates,
                   embed_class, encode_text, load_class_config)
from .tokenizer import (TokenSequence, Vocabulary, load_vocabulary,
                        save_vocabulary, tokenize)
from .vision import (AttentionStack, DenseFeatureMap, ImageTensor,
                     encode_image, forward_dense, forward_standard,
                     interpolate_pos_embed, load_image, preprocess)

__version__ = "0.1.0"

__all__ = [
    "AttentionStack", "ClassRegion", "ClassSet", "ConfigError", "DataError",
    "DenseFeatureMap", "ImageTensor", "InputError", "IntegrityError",
    "ModelConfig", "ParseError", "PatchTagError", "PipelineConfig",
    "PredictionTable", "PromptTemplate", "RefineConfig", "SchemaError",
    "ShapeError", "TagResult", "TokenSequence", "UsageError", "Vocabulary",
    "WeightBundle", "average_precision", "build_classifier", "class_region",
    "classify_patches", "default_fixture_config", "default_templates",
    "embed_class", "encode_image", "encode_text", "export_pseudo_labels",
    "forward_dense", "forward_standard", "fuse_scores", "generate_fixture",
    "interpolate_pos_embed", "load_bundle", "load_class_config", "load_image",
    "load_truth", "load_vocabulary", "local_scores", "mean_average_precision",
    "parse_pseudo_labels", "predict_tags", "preprocess", "read_tensors",
    "refine_scores", "reidentify_global", "required_tensor_shapes",
    "save_vocabulary", "tag_image", "tokenize", "toy_vocabulary", "vote_mask",
    "write_bundle",
]
