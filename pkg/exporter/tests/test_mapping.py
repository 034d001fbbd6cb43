import numpy as np
import pytest

from patchtag_export import UnsupportedCheckpointError, convert_hf_tensors, convert_research_tensors
from patchtag_export.mapping import count_indexed_layers

from export_support import pack_research_state


@pytest.fixture(scope="module")
def converted(hf_state):
    return convert_hf_tensors(hf_state, 2, 2)


def test_linear_weights_transposed(hf_state, converted):
    for tower, prefix in (("vision_model", "image"), ("text_model", "text")):
        for proj_src, proj_dst in (("q_proj", "q"), ("k_proj", "k"),
                                   ("v_proj", "v"), ("out_proj", "out")):
            src = hf_state[f"{tower}.encoder.layers.1.self_attn.{proj_src}.weight"]
            dst = converted[f"{prefix}.block.1.attn.{proj_dst}.weight"]
            assert dst.tobytes() == np.ascontiguousarray(src.T).tobytes()


def test_mlp_weights_transposed(hf_state, converted):
    src = hf_state["vision_model.encoder.layers.0.mlp.fc1.weight"]
    assert converted["image.block.0.mlp.fc1.weight"].shape == src.T.shape
    assert np.array_equal(converted["image.block.0.mlp.fc1.weight"], src.T)


def test_patch_filter_rows_flatten_channel_major(hf_state, converted):
    conv = hf_state["vision_model.embeddings.patch_embedding.weight"]
    flat = converted["image.patch_embed"]
    assert flat.shape == (conv[0].size, conv.shape[0])
    for out_channel in range(conv.shape[0]):
        assert np.array_equal(flat[:, out_channel],
                              conv[out_channel].reshape(-1))


def test_embedding_tables_copied_verbatim(hf_state, converted):
    pairs = (
        ("vision_model.embeddings.class_embedding", "image.class_embedding"),
        ("vision_model.embeddings.position_embedding.weight", "image.pos_embed"),
        ("text_model.embeddings.token_embedding.weight", "text.token_embed"),
        ("text_model.embeddings.position_embedding.weight", "text.pos_embed"),
    )
    for src, dst in pairs:
        assert converted[dst].tobytes() == hf_state[src].tobytes()


def test_projections_transposed(hf_state, converted):
    assert np.array_equal(converted["image.proj"],
                          hf_state["visual_projection.weight"].T)
    assert np.array_equal(converted["text.proj"],
                          hf_state["text_projection.weight"].T)


def test_logit_scale_becomes_length_one(hf_state, converted):
    assert converted["logit_scale"].shape == (1,)
    assert converted["logit_scale"][0] == np.float32(hf_state["logit_scale"])


def test_all_outputs_float32(converted):
    assert all(v.dtype == np.float32 for v in converted.values())


def test_missing_tensor_is_unsupported(hf_state):
    state = dict(hf_state)
    del state["text_model.encoder.layers.0.self_attn.k_proj.bias"]
    with pytest.raises(UnsupportedCheckpointError) as err:
        convert_hf_tensors(state, 2, 2)
    assert "text_model.encoder.layers.0.self_attn.k_proj.bias" in str(err.value)
    assert "expected" in str(err.value)


def test_unexpected_tensor_is_unsupported(hf_state):
    state = dict(hf_state)
    state["vision_model.adapter.weight"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(UnsupportedCheckpointError) as err:
        convert_hf_tensors(state, 2, 2)
    assert "vision_model.adapter.weight" in str(err.value)


def test_position_id_buffers_ignored(hf_state):
    state = dict(hf_state)
    state["text_model.embeddings.position_ids"] = np.arange(16)[None]
    converted = convert_hf_tensors(state, 2, 2)
    assert "position_ids" not in " ".join(converted)


def test_packed_qkv_split_matches_separate_projections(hf_state):
    via_hf = convert_hf_tensors(hf_state, 2, 2)
    via_packed = convert_research_tensors(pack_research_state(hf_state), 2, 2)
    assert sorted(via_hf) == sorted(via_packed)
    for name in via_hf:
        assert via_hf[name].tobytes() == via_packed[name].tobytes(), name


def test_research_missing_key_is_unsupported(hf_state):
    state = pack_research_state(hf_state)
    del state["visual.transformer.resblocks.1.mlp.c_proj.bias"]
    with pytest.raises(UnsupportedCheckpointError) as err:
        convert_research_tensors(state, 2, 2)
    assert "visual.transformer.resblocks.1.mlp.c_proj.bias" in str(err.value)


def test_packed_shape_mismatch_is_unsupported(hf_state):
    state = pack_research_state(hf_state)
    key = "transformer.resblocks.0.attn.in_proj_weight"
    state[key] = state[key][:-1]
    with pytest.raises(UnsupportedCheckpointError):
        convert_research_tensors(state, 2, 2)


def test_layer_scan_counts_contiguous_blocks(hf_state):
    state = pack_research_state(hf_state)
    assert count_indexed_layers(state, "visual.transformer.resblocks") == 2
    assert count_indexed_layers(state, "transformer.resblocks") == 2


def test_layer_scan_rejects_gaps():
    sparse = {"stack.0.weight": None, "stack.2.weight": None}
    with pytest.raises(UnsupportedCheckpointError):
        count_indexed_layers(sparse, "stack")
