import json
import os

import numpy as np
import pytest
import torch

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

import transformers  # noqa: E402
from transformers import CLIPModel  # noqa: E402

from patchtag import save_vocabulary  # noqa: E402
from patchtag.bundle import toy_vocabulary  # noqa: E402

from patchtag_export import export  # noqa: E402

from export_support import PIXEL_MEAN, PIXEL_STD, pack_research_state, tiny_clip_config  # noqa: E402

transformers.utils.logging.set_verbosity_error()
transformers.utils.logging.disable_progress_bar()


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A randomly initialized CLIP snapshot directory, saved locally."""
    path = tmp_path_factory.mktemp("source") / "checkpoint"
    path.mkdir()
    torch.manual_seed(1234)
    CLIPModel(tiny_clip_config()).save_pretrained(path)
    (path / "preprocessor_config.json").write_text(json.dumps(
        {"image_mean": list(PIXEL_MEAN), "image_std": list(PIXEL_STD)}))
    save_vocabulary(toy_vocabulary(), path / "vocab.json", path / "merges.txt")
    # reference tokenizer files open with a version header
    merges = (path / "merges.txt").read_text(encoding="utf-8")
    (path / "merges.txt").write_text("#version: 0.2\n" + merges,
                                     encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def hf_state(tiny_checkpoint):
    model = CLIPModel.from_pretrained(tiny_checkpoint).float()
    return {k: v.numpy() for k, v in model.state_dict().items()}


@pytest.fixture(scope="session")
def research_file(tiny_checkpoint, hf_state, tmp_path_factory):
    """The same weights as a packed-QKV state dict file, plus load options."""
    path = tmp_path_factory.mktemp("research") / "weights.pt"
    packed = {k: torch.from_numpy(np.ascontiguousarray(v))
              for k, v in pack_research_state(hf_state).items()}
    torch.save(packed, path)
    options = {
        "pixel_mean": PIXEL_MEAN,
        "pixel_std": PIXEL_STD,
        "vocab_path": tiny_checkpoint / "vocab.json",
        "merges_path": tiny_checkpoint / "merges.txt",
        "image_heads": 2,
        "text_heads": 2,
    }
    return path, options


@pytest.fixture(scope="session")
def exported(tiny_checkpoint, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("exported")
    report = export(tiny_checkpoint, out_dir)
    return out_dir, report
