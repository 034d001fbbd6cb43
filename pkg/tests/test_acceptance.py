"""Acceptance gate: each test covers one numbered criterion and prints a
single PASS line (failures raise with a matching FAIL line)."""

import json
import time

import numpy as np
import pytest
from PIL import Image

from patchtag import (PredictionTable, RefineConfig, export_pseudo_labels,
                      interpolate_pos_embed, parse_pseudo_labels, predict_tags,
                      average_precision, classify_patches, forward_dense,
                      fuse_scores, generate_fixture, load_bundle,
                      read_tensors, refine_scores, tokenize, vote_mask,
                      write_bundle)
from patchtag import kernels
from patchtag.bundle import default_fixture_config, toy_vocabulary
from patchtag.cli import main as cli_main
from patchtag.pipeline import AttentionStack
from patchtag.tokenizer import PAD_ID, encode_text_ids
from patchtag.vision import encode_image, preprocess, project_tokens

from support import random_image
from test_eval import ap_oracle
from test_tokenizer import reference_encode


def _verdict(name: str, condition: bool, detail: str):
    line = f"{name} {'PASS' if condition else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert condition, line


def test_p01_value_path_equivalence(bundle, rng):
    """Dense forward == standard forward with final-layer attention = I."""
    start = time.perf_counter()
    worst = 0.0
    for _ in range(5):
        img = preprocess(random_image(rng), "original", bundle.config)
        dense, _ = forward_dense(img, bundle)
        enc = encode_image(img, bundle, identity_last_attention=True)
        via_identity = project_tokens(bundle, enc.tokens[1:])
        worst = max(worst, float(np.abs(dense.features - via_identity).max()))
    elapsed = time.perf_counter() - start
    _verdict("P1", worst < 1e-5 and elapsed < 1.0,
             f"max |dense - identity-attention| = {worst:.2e}, {elapsed:.2f}s")


def _literal_vote_oracle(maps, k):
    layers, n, _ = maps.shape
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            votes = 0
            for l in range(layers):
                layer_mean = maps[l].sum() / (n * n)
                if maps[l, i, j] > layer_mean:
                    votes += 1
            out[i, j] = votes > k
    return out


def _literal_refine_oracle(scores, maps, psi, attn_mask):
    """Step-by-step scalar loops: masked transport, per-class vote,
    column-expanded second transport."""
    n, c_total = scores.shape
    first = np.zeros((n, c_total))
    for l in psi:
        masked = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if attn_mask[i, j]:
                    masked[i, j] = maps[l - 1][i, j]
        first += masked @ scores
    first /= len(psi)

    class_mask = np.zeros((n, c_total), dtype=bool)
    for c in range(c_total):
        col_mean = first[:, c].sum() / n
        for i in range(n):
            class_mask[i, c] = first[i, c] > col_mean

    refined = np.zeros((n, c_total))
    for l in psi:
        for c in range(c_total):
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    if attn_mask[i, j] and class_mask[j, c]:
                        acc += maps[l - 1][i, j] * scores[j, c]
                refined[i, c] += acc
    refined /= len(psi)
    return refined, class_mask


def test_p02_refinement_matches_literal_loop_oracle():
    rng = np.random.default_rng(42)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        layers = int(rng.integers(1, 5))
        n = int(rng.integers(2, 9))
        c = int(rng.integers(1, 5))
        maps = rng.random(size=(layers, n, n))
        maps /= maps.sum(axis=-1, keepdims=True)
        attn = AttentionStack(layers=maps.astype(np.float32))
        scores = rng.random(size=(n, c)).astype(np.float32)
        psi = tuple(sorted(rng.choice(np.arange(1, layers + 1),
                                      size=int(rng.integers(1, layers + 1)),
                                      replace=False).tolist()))
        k = int(rng.integers(0, layers + 1))

        got_vote = vote_mask(attn, k)
        want_vote = _literal_vote_oracle(maps, k)
        assert np.array_equal(got_vote, want_vote), "vote mask mismatch"

        cfg = RefineConfig(layers=psi, vote_threshold=k)
        got, got_mask = refine_scores(scores, attn, cfg)
        want, want_mask = _literal_refine_oracle(
            scores.astype(np.float64), attn.layers.astype(np.float64),
            psi, want_vote)
        assert np.array_equal(got_mask, want_mask), "class mask mismatch"
        worst = max(worst, float(np.abs(got.astype(np.float64) - want).max()))
        assert worst < 1e-6
    elapsed = time.perf_counter() - start
    _verdict("P2", worst < 1e-6 and elapsed < 10.0,
             f"1000 instances, max |refined - oracle| = {worst:.2e}, "
             f"{elapsed:.1f}s")


def test_p03_identity_refinement_is_noop():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        c = int(rng.integers(1, 5))
        layers = int(rng.integers(1, 4))
        eye = np.broadcast_to(np.eye(n, dtype=np.float32),
                              (layers, n, n)).copy()
        scores = rng.random(size=(n, c)).astype(np.float32)
        refined, _ = refine_scores(
            scores, AttentionStack(layers=eye),
            RefineConfig(layers=tuple(range(1, layers + 1)), vote_threshold=0),
            attn_mask=np.ones((n, n), dtype=bool),
            class_mask=np.ones((n, c), dtype=bool))
        worst = max(worst, float(np.abs(refined - scores).max()))
    _verdict("P3", worst < 1e-7,
             f"identity transport deviation = {worst:.2e} over 100 maps")


def test_p04_softmax_invariants():
    rng = np.random.default_rng(11)
    worst_sum = 0.0
    worst_shift = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        c = int(rng.integers(2, 9))
        d = int(rng.integers(2, 9))
        feats = rng.normal(size=(n, d)).astype(np.float32)
        clf = rng.normal(size=(d, c)).astype(np.float32)
        probs = classify_patches(feats, clf, temperature=float(rng.uniform(0.5, 60)))
        worst_sum = max(worst_sum, float(np.abs(probs.sum(axis=1) - 1.0).max()))

        logits = rng.normal(size=(n, c)) * 5
        shift = float(rng.uniform(-100, 100))
        base = kernels.softmax_rows(logits)
        moved = kernels.softmax_rows(logits + shift)
        worst_shift = max(worst_shift, float(np.abs(base - moved).max()))
    _verdict("P4", worst_sum < 1e-6 and worst_shift < 1e-6,
             f"1000 cases, row-sum dev = {worst_sum:.2e}, "
             f"shift dev = {worst_shift:.2e}")


def test_p05_fusion_endpoints_and_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        local, global_ = rng.random(2)
        assert fuse_scores(local, global_, 1.0) == local
        assert fuse_scores(local, global_, 0.0) == global_
        bigger_local = fuse_scores(local + 0.1, global_, 0.5)
        bigger_global = fuse_scores(local, global_ + 0.1, 0.5)
        base = fuse_scores(local, global_, 0.5)
        assert bigger_local > base and bigger_global > base
    _verdict("P5", True,
             "endpoints exact and fusion strictly monotone on 1000 triples")


def test_p06_tag_prediction_contract():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        c = int(rng.integers(2, 13))
        scores = rng.random(c).astype(np.float32)
        normalized, positive = predict_tags(scores)
        assert positive[int(np.argmax(scores))]
        if float(scores.max()) > float(scores.min()):
            assert not positive[int(np.argmin(scores))]
            assert normalized.max() == 1.0 and normalized.min() == 0.0
    flat = np.full(5, 0.42, dtype=np.float32)
    _, positive = predict_tags(flat)
    assert positive.tolist() == [True, False, False, False, False]
    _verdict("P6", True,
             "argmax positive, argmin negative, flat vector -> argmax only")


def test_p07_average_precision_oracle():
    hand = average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, False])
    assert hand == pytest.approx(5 / 6, abs=1e-9)
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(500):
        images = int(rng.integers(1, 21))
        scores = np.round(rng.random(images), 2)
        labels = rng.random(images) < 0.5
        if not labels.any():
            labels[int(rng.integers(0, images))] = True
        got = average_precision(scores.tolist(), labels.tolist())
        worst = max(worst, abs(got - ap_oracle(scores.tolist(), labels.tolist())))
    _verdict("P7", worst < 1e-9,
             f"hand case = 5/6, brute-force deviation = {worst:.2e}")


def test_p08_tokenizer_contract():
    vocab = toy_vocabulary()
    seq = tokenize("", vocab, 12)
    assert seq.ids == (vocab.sot_id, vocab.eot_id) + (PAD_ID,) * 10

    rng = np.random.default_rng(8)
    alphabet = list("abcdehlotg .?!'&")
    for _ in range(200):
        text = "".join(rng.choice(alphabet)
                       for _ in range(int(rng.integers(0, 30))))
        assert encode_text_ids(text, vocab) == reference_encode(text, vocab)

    long_seq = tokenize("dog " * 40, vocab, 16)
    assert len(long_seq.ids) == 16
    assert long_seq.ids[-1] == vocab.eot_id and long_seq.eot_index == 15
    _verdict("P8", True,
             "empty/merge-oracle/truncation checks over 200 random strings")


def test_p09_worker_count_determinism(tmp_path, fixture_dir,
                                      class_config_path):
    rng = np.random.default_rng(9)
    image_dir = tmp_path / "imgs"
    image_dir.mkdir()
    for i in range(16):
        Image.fromarray(random_image(rng)).save(image_dir / f"im_{i:02d}.png")
    pipeline_cfg = tmp_path / "pipeline.json"
    pipeline_cfg.write_text(json.dumps(
        {"refine_layers": [1, 2], "vote_threshold": 1, "crop_size": 8}))

    outputs = {}
    for workers in (1, 8):
        out = tmp_path / f"preds_w{workers}.jsonl"
        code = cli_main([
            "tag", str(image_dir / "*.png"),
            "--bundle", str(fixture_dir / "model.bundle"),
            "--classes", str(class_config_path),
            "--config", str(pipeline_cfg),
            "--out", str(out), "--workers", str(workers),
        ])
        assert code == 0
        outputs[workers] = out.read_bytes()
    identical = outputs[1] == outputs[8]
    _verdict("P9", identical,
             f"16 images, workers 1 vs 8, outputs identical = {identical}")


def test_p10_file_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    for round_ in range(5):
        tensors = {
            f"t{idx}": rng.normal(size=tuple(
                rng.integers(1, 5, size=int(rng.integers(1, 4))))).astype(np.float32)
            for idx in range(int(rng.integers(1, 6)))
        }
        path = tmp_path / f"r{round_}.bundle"
        write_bundle(path, tensors, {"round": str(round_)})
        loaded, metadata = read_tensors(path)
        assert metadata == {"round": str(round_)}
        for name, arr in tensors.items():
            assert np.array_equal(loaded[name], arr)

    bundle_path = generate_fixture(default_fixture_config(), seed=12,
                                   out_dir=tmp_path / "fx")
    bundle = load_bundle(bundle_path)
    rewritten = tmp_path / "rewritten.bundle"
    write_bundle(rewritten, {n: bundle.tensor(n) for n in bundle.tensor_names()},
                 bundle.metadata)
    assert rewritten.read_bytes() == bundle_path.read_bytes()

    names = ("dog", "cat")
    table = PredictionTable(class_names=names)
    for i in range(6):
        table.add(f"img{i}", rng.random(2), ("dog",) if i % 2 else ())
    jsonl = tmp_path / "preds.jsonl"
    export_pseudo_labels(table, jsonl)
    back = parse_pseudo_labels(jsonl, names)
    again = tmp_path / "again.jsonl"
    export_pseudo_labels(back, again)
    assert jsonl.read_bytes() == again.read_bytes()
    for image_id in table.scores:
        assert np.array_equal(back.scores[image_id], table.scores[image_id])
    _verdict("P10", True,
             "bundle and pseudo-label payloads bit-equal after write -> read")


def test_p11_native_grid_positional_identity(bundle):
    g = bundle.config.native_grid
    pos = interpolate_pos_embed(bundle, g, g)
    identical = np.array_equal(pos, bundle.tensor("image.pos_embed"))
    _verdict("P11", identical,
             f"native {g}x{g} request bit-equal = {identical}")
