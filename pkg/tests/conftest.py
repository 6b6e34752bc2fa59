import numpy as np
import pytest

from px3d.geometry import ProjectionConfig
from px3d.phantom import PhantomConfig, generate_phantom


@pytest.fixture(scope="session")
def desk_phantom():
    return generate_phantom(PhantomConfig(seed=3))


@pytest.fixture(scope="session")
def desk_proj():
    return ProjectionConfig.desk()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 desk phantoms expanded to 21 samples (2 train phantoms, 1 test)."""
    from px3d.harness.config import generate_sample_dataset

    out = tmp_path_factory.mktemp("tiny_dataset")
    manifest = generate_sample_dataset(out, count=3, base_seed=0, splits=(2, 0, 1))
    return manifest
