"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module. Inputs are
assumed validated by the dispatching wrappers in ``promptmil.kernels``.
"""

import numpy as np


def cosine_similarity(x, t):
    xn = np.sqrt(np.einsum("ij,ij->i", x, x))
    tn = np.sqrt(np.einsum("ij,ij->i", t, t))
    return (x @ t.T) / xn[:, None] / tn[None, :]


def top_k(values, k):
    idx = np.arange(len(values))
    # lexsort: last key is primary
    order = np.lexsort((idx, -values))
    return order[:k].astype(np.int64)


def auc_counts(scores_sorted, labels_sorted):
    """Return (2*concordant + tied, n_pos, n_neg) for scores sorted ascending."""
    n = len(scores_sorted)
    twice = 0
    neg_below = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores_sorted[j + 1] == scores_sorted[i]:
            j += 1
        block = labels_sorted[i:j + 1]
        pos_here = int(block.sum())
        neg_here = (j - i + 1) - pos_here
        twice += 2 * pos_here * neg_below + pos_here * neg_here
        neg_below += neg_here
        i = j + 1
    n_pos = int(labels_sorted.sum())
    return twice, n_pos, n - n_pos


def kmeans_lloyd(x, centers, n_iter):
    centers = centers.copy()
    labels = np.full(len(x), -1, dtype=np.int64)
    for _ in range(n_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1).astype(np.int64)  # first minimum wins ties
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return labels, centers
