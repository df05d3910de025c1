"""Pure-numpy scan kernels. Fallback when the compiled extension is absent.

Contract shared with the compiled twin in ``_scan.pyx``:

* ``dot_scores``: inner product of every float32 row against a float64 query,
  accumulated in float64.
* ``topk_scan``: indices and scores of the k best rows, ordered by score
  descending with ties broken by row index ascending. Fewer than k rows are
  returned only when the matrix has fewer than k rows.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float32)
    query = np.asarray(query, dtype=np.float64)
    if matrix.ndim != 2 or query.ndim != 1 or matrix.shape[1] != query.shape[0]:
        raise ValueError(f"shape mismatch: matrix {matrix.shape} vs query {query.shape}")
    return matrix.astype(np.float64) @ query


def topk_from_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ordered by (score desc, index asc)."""
    n = scores.shape[0]
    if k >= n:
        return np.argsort(-scores, kind="stable")
    # argpartition may pick arbitrary members of a tie straddling the cut, so
    # rebuild the boundary: everything strictly above the kth value, then the
    # lowest-index rows equal to it.
    part = np.argpartition(-scores, k - 1)[:k]
    kth = scores[part].min()
    above = np.flatnonzero(scores > kth)
    need = k - above.size
    at_kth = np.flatnonzero(scores == kth)[:need]
    cand = np.concatenate([above, at_kth])
    return cand[np.argsort(-scores[cand], kind="stable")]


def topk_scan(matrix: np.ndarray, query: np.ndarray, k: int):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = dot_scores(matrix, query)
    order = topk_from_scores(scores, k)[:k]
    return order.astype(np.int64), scores[order]
