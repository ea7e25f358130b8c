import numpy as np
import pandas as pd
import pytest

from morphtools.images import save_image
from morphtools.models import make_toy_models
from morphtools.tensor import Tensor

SMALL_SIDE = 32
SMALL_LATENT = (4, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_models():
    """Toy bundle small enough for end-to-end optimisation in tests."""
    return make_toy_models(3, image_side=SMALL_SIDE, latent=SMALL_LATENT, embed_dim=16)


@pytest.fixture(scope="session")
def subject_images(small_models):
    """Two distinct subjects drawn from the toy generator."""
    latents = np.random.default_rng(99).standard_normal((2,) + SMALL_LATENT)
    return tuple(small_models.generate(Tensor(z)).numpy() for z in latents)


@pytest.fixture
def pair_csv(tmp_path, subject_images):
    """PNG subjects plus a pair list referencing them with relative paths."""
    faces = tmp_path / "faces"
    faces.mkdir()
    save_image(subject_images[0], faces / "alice.png")
    save_image(subject_images[1], faces / "bob.png")
    path = tmp_path / "pairs.csv"
    pd.DataFrame({
        "morph_id": ["m001"],
        "subject1_image": ["faces/alice.png"],
        "subject2_image": ["faces/bob.png"],
    }).to_csv(path, index=False)
    return path
