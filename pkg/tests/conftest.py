import json

import numpy as np
import pytest

from patchtag import (ClassSet, PromptTemplate, build_classifier,
                      default_fixture_config, generate_fixture, load_bundle)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    generate_fixture(default_fixture_config(), seed=0, out_dir=out)
    return out


@pytest.fixture(scope="session")
def bundle(fixture_dir):
    return load_bundle(fixture_dir / "model.bundle")


@pytest.fixture(scope="session")
def class_set():
    return ClassSet(foreground=("dog", "cat", "bus"), background=("sky", "grass"))


@pytest.fixture(scope="session")
def templates():
    return [PromptTemplate("a photo of a {}."), PromptTemplate("itap of a {}.")]


@pytest.fixture(scope="session")
def classifier(bundle, class_set, templates):
    return build_classifier(class_set, templates, bundle)


@pytest.fixture(scope="session")
def class_config_path(tmp_path_factory, class_set, templates):
    path = tmp_path_factory.mktemp("cfg") / "classes.json"
    path.write_text(json.dumps({
        "foreground": list(class_set.foreground),
        "background": list(class_set.background),
        "templates": [t.pattern for t in templates],
    }))
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
