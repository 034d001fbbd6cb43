"""Text tower and zero-shot classifier construction.

Class names are turned into prompt sentences, encoded by the causal text
transformer, and averaged across templates into one unit-norm column per
class. The resulting matrix can be cached on disk keyed by the weight
bundle and the exact class/template lists.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import kernels
from .bundle import WeightBundle, read_tensors, write_bundle
from .errors import ConfigError, ParseError, SchemaError
from .tokenizer import TokenSequence, tokenize
from .vision import _block_params, activation_fn, transformer_block


@dataclass(frozen=True)
class PromptTemplate:
    """A sentence pattern with exactly one ``{}`` placeholder."""
    pattern: str

    def __post_init__(self):
        if self.pattern.count("{}") != 1:
            raise ConfigError(
                f"template needs exactly one {{}} placeholder: {self.pattern!r}")

    def fill(self, name: str) -> str:
        return self.pattern.replace("{}", name)


@dataclass(frozen=True)
class ClassSet:
    """Foreground classes to tag plus background classes used as softmax sinks.

    Background columns take part in every softmax but are never reported
    as tags and never enter score normalisation.
    """
    foreground: tuple[str, ...]
    background: tuple[str, ...] = ()

    def __post_init__(self):
        names = list(self.foreground) + list(self.background)
        if not self.foreground:
            raise ConfigError("class set needs at least one foreground class")
        if any(not n or not n.strip() for n in names):
            raise ConfigError("class names must be nonempty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate class names: {dupes}")

    @property
    def all_names(self) -> tuple[str, ...]:
        return self.foreground + self.background

    @property
    def num_foreground(self) -> int:
        return len(self.foreground)

    @property
    def total(self) -> int:
        return len(self.foreground) + len(self.background)


def default_templates() -> list[PromptTemplate]:
    """The standard 80-sentence prompt ensemble."""
    path = os.path.join(os.path.dirname(__file__), "configs", "templates_80.json")
    with open(path, encoding="utf-8") as fh:
        return [PromptTemplate(p) for p in json.load(fh)]


def load_class_config(path) -> tuple[ClassSet, list[PromptTemplate] | None]:
    """Read a class-set JSON file: foreground, background, optional templates."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read class config {path}: {exc}") from exc
    if not isinstance(raw, dict) or "foreground" not in raw:
        raise SchemaError(f"class config {path} must be an object with 'foreground'")
    unknown = set(raw) - {"foreground", "background", "templates"}
    if unknown:
        raise SchemaError(f"class config {path} has unknown keys: {sorted(unknown)}")

    def str_list(key):
        value = raw.get(key, [])
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            raise SchemaError(f"class config field {key!r} must be a list of strings")
        return value

    classes = ClassSet(foreground=tuple(str_list("foreground")),
                       background=tuple(str_list("background")))
    templates = None
    if "templates" in raw:
        templates = [PromptTemplate(p) for p in str_list("templates")]
    return classes, templates


def encode_text(tokens: TokenSequence, bundle: WeightBundle) -> np.ndarray:
    """Causal transformer encoding; the end-of-text position is projected."""
    cfg = bundle.config
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.shape != (cfg.context_length,):
        raise SchemaError(
            f"token sequence length {ids.shape[0]} != context {cfg.context_length}")
    x = bundle.tensor("text.token_embed")[ids] + bundle.tensor("text.pos_embed")

    n = cfg.context_length
    causal = np.triu(np.full((n, n), -np.inf, dtype=np.float64), k=1)
    act = activation_fn(cfg)
    for layer in range(cfg.text_layers):
        params = _block_params(bundle, "text", layer)
        x, _ = transformer_block(x, params, cfg.text_heads, cfg.layer_norm_eps,
                                 act, bias=causal)
    x = kernels.layer_norm(x, bundle.tensor("text.ln_final.weight"),
                           bundle.tensor("text.ln_final.bias"), cfg.layer_norm_eps)
    return kernels.matmul(x[tokens.eot_index:tokens.eot_index + 1],
                          bundle.tensor("text.proj"))[0]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm == 0.0:
        return v
    return (v.astype(np.float64) / norm).astype(np.float32)


def embed_class(name: str, templates: list[PromptTemplate],
                bundle: WeightBundle) -> np.ndarray:
    """Mean of unit-norm template embeddings, renormalised to unit length."""
    if not templates:
        raise ConfigError("at least one prompt template is required")
    acc = np.zeros(bundle.config.embed_dim, dtype=np.float64)
    for template in templates:
        toks = tokenize(template.fill(name), bundle.vocab, bundle.config.context_length)
        acc += _unit(encode_text(toks, bundle)).astype(np.float64)
    return _unit((acc / len(templates)).astype(np.float32))


def classifier_cache_key(bundle: WeightBundle, classes: ClassSet,
                         templates: list[PromptTemplate]) -> str:
    payload = json.dumps({
        "bundle": bundle.content_hash(),
        "foreground": list(classes.foreground),
        "background": list(classes.background),
        "templates": [t.pattern for t in templates],
    }, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_classifier(classes: ClassSet, templates: list[PromptTemplate],
                     bundle: WeightBundle, cache_dir=None) -> np.ndarray:
    """Stack class embeddings into an (embed_dim, C_total) matrix."""
    cache_path = None
    if cache_dir is not None:
        key = classifier_cache_key(bundle, classes, templates)
        cache_path = os.path.join(cache_dir, f"classifier-{key}.bundle")
        if os.path.exists(cache_path):
            tensors, _ = read_tensors(cache_path)
            return tensors["classifier"]

    columns = [embed_class(name, templates, bundle) for name in classes.all_names]
    matrix = np.stack(columns, axis=1).astype(np.float32)

    if cache_path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
        os.close(fd)
        try:
            write_bundle(tmp, {"classifier": matrix}, {"kind": "classifier-cache"})
            os.replace(tmp, cache_path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
    return matrix
