"""P x K identity-balanced batch sampling with an explicit RNG state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(eq=False)
class Batch:
    sequences: list
    labels: np.ndarray
    P: int
    K: int

    def __len__(self):
        return len(self.sequences)


def rng_state(seed):
    """Fresh PCG64 state dict for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed)).bit_generator.state


def _generator(state):
    if isinstance(state, (int, np.integer)):
        state = rng_state(int(state))
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def sample_batch(dataset, P, K, state):
    """Draw P identities without replacement and K sequences of each.

    Sequences are drawn without replacement when the identity has at least
    K of them, otherwise with replacement. Returns ``(batch, new_state)``;
    ``state`` itself is never mutated.
    """
    if P < 2 or K < 2:
        raise UsageError(f"P and K must both be >= 2, got P={P}, K={K}")
    ids = sorted(dataset.index)
    if P > len(ids):
        raise UsageError(f"P={P} exceeds the {len(ids)} identities in the dataset")
    rng = _generator(state)
    chosen = rng.choice(ids, size=P, replace=False)
    sequences, labels = [], []
    for ident in chosen:
        positions = dataset.index[int(ident)]
        picks = rng.choice(positions, size=K, replace=len(positions) < K)
        sequences.extend(dataset.sequences[p] for p in picks)
        labels.extend([int(ident)] * K)
    return Batch(sequences, np.array(labels, dtype=np.int64), P, K), rng.bit_generator.state
