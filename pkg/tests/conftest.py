import os

# single-threaded BLAS: faster on these small problems and bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from drogsure import dataio, robustness  # noqa: E402


@pytest.fixture(scope="session")
def fixture_data():
    """The acceptance fixture: P=4, 40/cluster, T=3, 8x8, d_s=3, d_p=2."""
    return dataio.gen_synthetic(dataio.FIXTURE_SPEC, seed=dataio.FIXTURE_DATA_SEED)


@pytest.fixture(scope="session")
def fixture_runner(fixture_data):
    """Shared trained-run cache over the fixture; reused across criteria."""
    learning, validation = fixture_data
    configs = {
        "drogsure": dataio.fixture_model_config("drogsure"),
        "dmsc": dataio.fixture_model_config("dmsc"),
    }
    return robustness.PipelineRunner(
        learning, validation, configs, dataio.FIXTURE_SPEC.clusters,
        subspace_dim=dataio.FIXTURE_SUBSPACE_DIM,
    )


@pytest.fixture(scope="session")
def tiny_data():
    """A much smaller dataset for fast end-to-end paths."""
    spec = dataio.SyntheticSpec(
        clusters=2, per_cluster=16, side=6, modalities=2,
        shared_dim=2, private_dim=1, noise_sigma=0.01, seed=7,
    )
    return dataio.gen_synthetic(spec, seed=7), spec


def rng(seed=0):
    return np.random.default_rng(seed)
