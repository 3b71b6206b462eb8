import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hardmetric.data import LabeledDataset
from hardmetric.errors import UsageError
from hardmetric.model import Condition, FeatureSequence
from hardmetric.sampler import rng_state, sample_batch


def make_dataset(counts):
    seqs = []
    for ident, n in enumerate(counts):
        for s in range(n):
            seqs.append(FeatureSequence(ident, 0, Condition.BASE, np.full((2, 1), 10.0 * ident + s), seq=s))
    return LabeledDataset(seqs, len(counts))


def check_batch(batch, dataset, P, K):
    assert len(batch.sequences) == len(batch.labels) == P * K
    blocks = batch.labels.reshape(P, K)
    assert np.all(blocks == blocks[:, :1])
    assert len(set(blocks[:, 0].tolist())) == P
    assert all(s.id == lab for s, lab in zip(batch.sequences, batch.labels))
    for ident, block in zip(blocks[:, 0], np.split(np.arange(P * K), P)):
        keys = [batch.sequences[i].key for i in block]
        if len(dataset.index[int(ident)]) >= K:
            assert len(set(keys)) == K


def test_two_ids_four_seqs():
    ds = make_dataset([4, 4])
    batch, _ = sample_batch(ds, 2, 2, rng_state(0))
    check_batch(batch, ds, 2, 2)


@given(seed=st.integers(0, 2**63), P=st.integers(2, 5), K=st.integers(2, 5))
def test_invariants_hold(seed, P, K):
    ds = make_dataset([1, 3, 5, 2, 4])
    batch, state = sample_batch(ds, P, K, rng_state(seed))
    check_batch(batch, ds, P, K)


def test_deterministic_and_pure():
    ds = make_dataset([3, 3, 3, 3])
    state = rng_state(5)
    snapshot = dict(state)
    a, next_a = sample_batch(ds, 2, 2, state)
    b, next_b = sample_batch(ds, 2, 2, state)
    assert state == snapshot
    assert [s.key for s in a.sequences] == [s.key for s in b.sequences]
    assert next_a == next_b and next_a != state


def test_single_sequence_identity_is_repeated():
    ds = make_dataset([1, 1])
    batch, _ = sample_batch(ds, 2, 4, rng_state(0))
    for ident in (0, 1):
        picked = [s for s in batch.sequences if s.id == ident]
        assert len(picked) == 4 and all(s is picked[0] for s in picked)


@pytest.mark.parametrize("P, K", [(3, 2), (1, 2), (2, 1)])
def test_bad_batch_shapes(P, K):
    with pytest.raises(UsageError):
        sample_batch(make_dataset([2, 2]), P, K, rng_state(0))


def test_selection_frequency_is_uniform():
    n_ids, P, draws = 16, 4, 10_000
    ds = make_dataset([3] * n_ids)
    counts = np.zeros(n_ids)
    state = rng_state(2024)
    for _ in range(draws):
        batch, state = sample_batch(ds, P, 2, state)
        counts[np.unique(batch.labels)] += 1
    expected = draws * P / n_ids
    assert np.max(np.abs(counts - expected)) / expected < 0.05
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 15 degrees of freedom; 37.7 is the 0.001 upper quantile
    assert chi2 < 37.7
