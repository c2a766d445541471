import numpy as np
import pytest

from sketchbodynet import gradcore as gc
from sketchbodynet.bodymodel import make_mini_model


@pytest.fixture(scope="session")
def mini_spec():
    return make_mini_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(values, requires_grad=True):
    return gc.Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, mini_spec):
    from sketchbodynet.pipeline import build_dataset, load_manifest

    out = tmp_path_factory.mktemp("dataset")
    build_dataset(mini_spec, 4, [0.0, np.pi / 2], 7, str(out), n_freehand=2)
    return load_manifest(str(out / "manifest.json"))
