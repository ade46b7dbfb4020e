import numpy as np
import pytest

from glomseg.models import ModelConfig
from glomseg.synthetic import FixtureSpec, generate_fixture


TINY_MODEL = ModelConfig(arch="segformer", variant="tiny")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Small synthetic dataset shared across test modules."""
    root = tmp_path_factory.mktemp("synthetic")
    spec = FixtureSpec(size=64, n_labeled_wsis=6, labeled_per_wsi=2,
                       n_unlabeled_wsis=8, unlabeled_per_wsi=2, n_centers=4,
                       n_val_wsis=3, val_per_wsi=2, seed=7)
    generate_fixture(root, spec)
    return root


def random_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
