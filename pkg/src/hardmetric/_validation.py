"""Input checks shared by the estimator front end."""

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d


def check_sequences(X, d_in=None):
    """Coerce ``X`` to a list of float64 (n_frames, d_in) arrays.

    Accepts a 3-D array (n_samples, n_frames, d_in) or a sequence of 2-D
    arrays with possibly different frame counts.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        check_array(X.reshape(X.shape[0], -1), dtype=np.float64)
        seqs = list(np.asarray(X, dtype=np.float64))
    else:
        seqs = [check_array(x, dtype=np.float64) for x in X]
    if not seqs:
        raise ValueError("X contains no sequences")
    widths = {s.shape[1] for s in seqs}
    if len(widths) != 1:
        raise ValueError(f"all sequences need the same frame width, got {sorted(widths)}")
    if d_in is not None and widths != {d_in}:
        raise ValueError(f"X has frame width {widths.pop()}, but the estimator was fitted with {d_in}")
    return seqs


def check_sequence_labels(X, y):
    seqs = check_sequences(X)
    y = column_or_1d(y)
    if len(y) != len(seqs):
        raise ValueError(f"X has {len(seqs)} sequences but y has {len(y)} labels")
    return seqs, y
