import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

from hardmetric.data import DatasetSpec, generate
from hardmetric.model import Condition, FeatureSequence, ModelDims, init_params

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {key}: {title} | {detail}")


def random_batch(rng, P, K, n_dim=4, scale=1.0):
    """Unit-norm random rows with P*K contiguous labels."""
    rows = rng.standard_normal((P * K, n_dim)) * scale
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    labels = np.repeat(np.arange(P), K)
    return rows, labels


def random_sequences(rng, labels, n_frames=5, d_in=3):
    return [FeatureSequence(int(i), 0, Condition.BASE, rng.standard_normal((n_frames, d_in)), seq=j)
            for j, i in enumerate(labels)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(n_ids=6, views=(0, 90), seqs_per_cell=2, n_frames=6, d_in=5, confusion_pairs=2, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def small_dims(small_spec):
    return ModelDims(d_in=small_spec.d_in, d_hid=7, n_dim=4)


@pytest.fixture
def small_params(small_dims):
    return init_params(small_dims, 7)


@pytest.fixture(scope="session")
def default_dataset():
    return generate(DatasetSpec())


@pytest.fixture(scope="session")
def default_run(default_dataset):
    """One uninterrupted training run of the shipped default configuration."""
    from hardmetric.trainer import TrainConfig, run

    cfg = TrainConfig()
    state, runlog = run(cfg, default_dataset)
    return cfg, state, runlog
