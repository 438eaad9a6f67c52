import os
from pathlib import Path

import numpy as np
import pytest

from foveate import dataset as ds
from foveate import vae
from foveate.priority import PriorityAtlas

REPO = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def corpus():
    """Canonical generated corpus, cached in the repo data directory."""
    os.environ.setdefault("FOVEATE_DATA_DIR", str(REPO / "data"))
    return ds.ensure_dataset()


@pytest.fixture(scope="session")
def train_set(corpus):
    return corpus[0]


@pytest.fixture(scope="session")
def test_set(corpus):
    return corpus[1]


def random_weights(rng, hidden=(32,), enc_hidden=(48,)) -> vae.VaeWeights:
    """Small random stack with the canonical 784/30//20/784 interface."""
    def layer(nin, nout, act):
        return vae.Layer(W=rng.normal(0, 0.2, size=(nout, nin)).astype(np.float32),
                         b=rng.normal(0, 0.05, size=nout).astype(np.float32),
                         activation=act)
    enc_dims = [784, *enc_hidden, 30]
    dec_dims = [20, *hidden, 784]
    encoder = [layer(i, o, vae.ACT_RELU) for i, o in zip(enc_dims[:-2], enc_dims[1:-1])]
    encoder.append(layer(enc_dims[-2], enc_dims[-1], vae.ACT_IDENTITY))
    decoder = [layer(i, o, vae.ACT_RELU) for i, o in zip(dec_dims[:-2], dec_dims[1:-1])]
    decoder.append(layer(dec_dims[-2], dec_dims[-1], vae.ACT_SIGMOID))
    return vae.VaeWeights(encoder=encoder, decoder=decoder)


@pytest.fixture()
def small_weights():
    return random_weights(np.random.default_rng(11))


@pytest.fixture(scope="session")
def fixture_weights():
    """Trained weight fixture committed with the repository."""
    path = FIXTURES / "weights.vaew"
    if not path.exists():
        pytest.skip("trained weight fixture not present")
    return vae.load_weights(path)


@pytest.fixture(scope="session")
def fixture_atlas():
    from foveate.priority import load_atlas
    path = FIXTURES / "atlas.patl"
    if not path.exists():
        pytest.skip("atlas fixture not present")
    return load_atlas(path)


def toy_atlas(seed=5) -> PriorityAtlas:
    """Arbitrary valid atlas for model-construction tests."""
    rng = np.random.default_rng(seed)
    return PriorityAtlas(levels=rng.integers(1, 6, size=(10, 2, 7, 7)).astype(np.uint8))
