import json
import struct

import numpy as np
import pytest

from patchtag import (IntegrityError, ModelConfig, ParseError, SchemaError,
                      default_fixture_config, generate_fixture, load_bundle,
                      read_tensors, required_tensor_shapes, write_bundle)


def test_config_round_trip():
    cfg = default_fixture_config()
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg
    assert cfg.image_mlp_dim == 4 * cfg.image_width


def test_config_rejects_unknown_and_invalid():
    cfg = default_fixture_config()
    raw = json.loads(cfg.to_json())
    raw["mystery"] = 1
    with pytest.raises(SchemaError):
        ModelConfig.from_json(json.dumps(raw))
    with pytest.raises(SchemaError):
        ModelConfig.from_json(cfg.to_json().replace('"image_heads": 2', '"image_heads": 3'))
    with pytest.raises(SchemaError):
        ModelConfig.from_json(cfg.to_json().replace('"gelu"', '"swish"'))


def test_write_read_round_trip(tmp_path, rng):
    tensors = {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta": rng.normal(size=(7,)).astype(np.float32),
        "gamma.delta": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }
    path = tmp_path / "t.bundle"
    write_bundle(path, tensors, {"note": "round trip"})
    loaded, metadata = read_tensors(path)
    assert metadata == {"note": "round trip"}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.float32


def test_write_is_deterministic(tmp_path, rng):
    tensors = {"a": rng.normal(size=(4, 4)).astype(np.float32),
               "b": rng.normal(size=(2,)).astype(np.float32)}
    p1, p2 = tmp_path / "one.bundle", tmp_path / "two.bundle"
    write_bundle(p1, tensors, {"k": "v"})
    write_bundle(p2, dict(reversed(list(tensors.items()))), {"k": "v"})
    assert p1.read_bytes() == p2.read_bytes()


def test_fixture_same_seed_identical_bytes(tmp_path):
    cfg = default_fixture_config()
    a = generate_fixture(cfg, seed=7, out_dir=tmp_path / "a")
    b = generate_fixture(cfg, seed=7, out_dir=tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    c = generate_fixture(cfg, seed=8, out_dir=tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_fixture_loads_and_lists_all_required(bundle):
    required = required_tensor_shapes(bundle.config)
    names = bundle.tensor_names()
    assert set(required) <= set(names)
    assert names == sorted(names)
    for name, shape in required.items():
        assert bundle.tensor(name).shape == shape
    assert bundle.temperature == pytest.approx(30.0, rel=1e-5)


def test_missing_tensor_rejected(tmp_path, fixture_dir):
    raw = (fixture_dir / "model.bundle").read_bytes()
    header_len = struct.unpack_from("<Q", raw)[0]
    header = json.loads(raw[8:8 + header_len])
    victim = "image.block.0.attn.q.weight"
    del header[victim]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = tmp_path / "missing.bundle"
    out.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + header_len:])
    (tmp_path / "vocab.json").write_bytes((fixture_dir / "vocab.json").read_bytes())
    (tmp_path / "merges.txt").write_bytes((fixture_dir / "merges.txt").read_bytes())
    with pytest.raises(SchemaError, match="image.block.0.attn.q.weight"):
        load_bundle(out)


def test_wrong_shape_rejected(tmp_path, fixture_dir, bundle):
    tensors = {n: bundle.tensor(n) for n in bundle.tensor_names()}
    tensors["image.proj"] = tensors["image.proj"][:, :-1]
    out = tmp_path / "shape.bundle"
    write_bundle(out, tensors, bundle.metadata)
    (tmp_path / "vocab.json").write_bytes((fixture_dir / "vocab.json").read_bytes())
    (tmp_path / "merges.txt").write_bytes((fixture_dir / "merges.txt").read_bytes())
    with pytest.raises(SchemaError, match="image.proj"):
        load_bundle(out)


def test_truncated_file_rejected(tmp_path, fixture_dir):
    raw = (fixture_dir / "model.bundle").read_bytes()
    out = tmp_path / "trunc.bundle"
    out.write_bytes(raw[: len(raw) // 2])
    with pytest.raises((ParseError, IntegrityError)):
        load_bundle(out)
    out.write_bytes(raw[:4])
    with pytest.raises(ParseError):
        load_bundle(out)


def _rewrite_offsets(fixture_dir, tmp_path, name, mutate):
    raw = (fixture_dir / "model.bundle").read_bytes()
    header_len = struct.unpack_from("<Q", raw)[0]
    header = json.loads(raw[8:8 + header_len])
    header[name]["data_offsets"] = mutate(header[name]["data_offsets"])
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = tmp_path / "edited.bundle"
    out.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + header_len:])
    (tmp_path / "vocab.json").write_bytes((fixture_dir / "vocab.json").read_bytes())
    (tmp_path / "merges.txt").write_bytes((fixture_dir / "merges.txt").read_bytes())
    return out


def test_overlapping_ranges_rejected(tmp_path, fixture_dir):
    raw = (fixture_dir / "model.bundle").read_bytes()
    header_len = struct.unpack_from("<Q", raw)[0]
    header = json.loads(raw[8:8 + header_len])
    name = next(n for n, e in header.items()
                if n != "__metadata__" and e["data_offsets"][0] >= 4)
    out = _rewrite_offsets(fixture_dir, tmp_path, name,
                           lambda o: [o[0] - 4, o[1] - 4])
    with pytest.raises(IntegrityError, match="overlap"):
        load_bundle(out)


def test_range_past_end_rejected(tmp_path, fixture_dir):
    raw = (fixture_dir / "model.bundle").read_bytes()
    header_len = struct.unpack_from("<Q", raw)[0]
    header = json.loads(raw[8:8 + header_len])
    data_len = len(raw) - 8 - header_len
    name = max((n for n in header if n != "__metadata__"),
               key=lambda n: header[n]["data_offsets"][1])
    out = _rewrite_offsets(fixture_dir, tmp_path, name,
                           lambda o: [o[0] + data_len, o[1] + data_len])
    with pytest.raises(IntegrityError):
        load_bundle(out)


def test_header_not_json_rejected(tmp_path):
    out = tmp_path / "garbage.bundle"
    out.write_bytes(struct.pack("<Q", 5) + b"ab{cd" + b"\0" * 16)
    with pytest.raises(ParseError):
        load_bundle(out)


def test_vocab_size_mismatch_rejected(tmp_path, fixture_dir, bundle):
    tensors = {n: bundle.tensor(n) for n in bundle.tensor_names()}
    raw = json.loads(bundle.config.to_json())
    raw["vocab_size"] = bundle.config.vocab_size
    metadata = dict(bundle.metadata)
    out = tmp_path / "vocab.bundle"
    write_bundle(out, tensors, metadata)
    (tmp_path / "merges.txt").write_bytes((fixture_dir / "merges.txt").read_bytes())
    vocab = json.loads((fixture_dir / "vocab.json").read_text())
    dropped = next(k for k in vocab
                   if k not in ("<|startoftext|>", "<|endoftext|>"))
    # removing one entry both breaks the count and un-denses the ids
    del vocab[dropped]
    (tmp_path / "vocab.json").write_text(json.dumps(vocab))
    with pytest.raises(SchemaError):
        load_bundle(out)
