"""scikit-learn front end for the embedder and its training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from ._validation import check_sequence_labels, check_sequences
from .data import LabeledDataset
from .drpl import DRPLSchedule
from .gsam import GsamConfig, init_memory
from .model import Condition, FeatureSequence, ModelDims, embed_frames
from .trainer import MemoryConfig, OptimizerConfig, TrainConfig, train


class HardSampleEmbedder(TransformerMixin, BaseEstimator):
    """Sequence embedder trained with hardness-reweighted triplet losses and
    a class-centroid memory bank.

    ``fit`` takes sequences of frames and identity labels; ``transform``
    returns unit-norm embeddings; ``predict`` assigns each sequence to the
    nearest training-class centroid.

    Parameters
    ----------
    d_hid, n_dim : int
        Hidden width and embedding dimension.
    P, K : int
        Identities per batch and sequences per identity.
    total_iters : int
        Training iterations.
    use_drpl_bh, use_gsam : bool
        Toggle the reweighted batch-hard-like term and the memory-bank loss.
    random_state : int
        Seeds both parameter initialization and batch sampling.
    """

    def __init__(
        self,
        d_hid=64,
        n_dim=32,
        P=8,
        K=4,
        total_iters=2000,
        learning_rate=1e-3,
        delta_min=0.1,
        epsilon=1.4,
        margin=0.2,
        tau=0.1,
        variance_mode="BatchMean",
        memory_mode="PU_AU",
        alpha=0.9,
        beta=0.9,
        use_drpl_bh=True,
        use_gsam=True,
        random_state=0,
    ):
        self.d_hid = d_hid
        self.n_dim = n_dim
        self.P = P
        self.K = K
        self.total_iters = total_iters
        self.learning_rate = learning_rate
        self.delta_min = delta_min
        self.epsilon = epsilon
        self.margin = margin
        self.tau = tau
        self.variance_mode = variance_mode
        self.memory_mode = memory_mode
        self.alpha = alpha
        self.beta = beta
        self.use_drpl_bh = use_drpl_bh
        self.use_gsam = use_gsam
        self.random_state = random_state

    def _train_config(self, d_in):
        return TrainConfig(
            model=ModelDims(d_in, self.d_hid, self.n_dim),
            P=self.P,
            K=self.K,
            drpl=DRPLSchedule(self.delta_min, self.epsilon, self.total_iters, self.margin),
            gsam=GsamConfig(self.tau, self.variance_mode),
            memory=MemoryConfig(self.memory_mode, self.alpha, self.beta),
            optimizer=OptimizerConfig(learning_rate=self.learning_rate),
            total_iters=self.total_iters,
            seed=self.random_state,
            use_drpl_bh=self.use_drpl_bh,
            use_gsam=self.use_gsam,
        )

    def fit(self, X, y):
        seqs, y = check_sequence_labels(X, y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < self.P:
            raise ValueError(f"need at least P={self.P} classes, got {len(self.classes_)}")
        codes = self._encoder.transform(y)
        dataset = LabeledDataset(
            [FeatureSequence(int(c), 0, Condition.BASE, s, seq=i) for i, (c, s) in enumerate(zip(codes, seqs))],
            n_ids=len(self.classes_),
        )
        self.n_features_in_ = seqs[0].shape[1]
        cfg = self._train_config(self.n_features_in_)
        self.params_, self.memory_, self.run_log_ = train(cfg, dataset)
        self.centroids_ = init_memory(dataset, self.params_).rows
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        seqs = check_sequences(X, self.n_features_in_)
        if len({s.shape for s in seqs}) == 1:
            return embed_frames(self.params_, np.stack(seqs))
        return np.concatenate([embed_frames(self.params_, s[None]) for s in seqs], axis=0)

    def predict(self, X):
        emb = self.transform(X)
        return self.classes_[np.argmax(emb @ self.centroids_.T, axis=1)]

    def score(self, X, y):
        """Nearest-centroid accuracy."""
        return float(np.mean(self.predict(X) == np.asarray(y)))
