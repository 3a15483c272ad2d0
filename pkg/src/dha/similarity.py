"""Head-to-head similarity and per-layer redundancy.

Heads are compared as their (d_model, d_k) weight matrices with linear,
uncentered CKA: ||X^T Y||_F^2 / (||X^T X||_F * ||Y^T Y||_F). The score is
scale- and orthogonal-transformation-invariant and lies in [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SimilarityUndefinedError
from .linalg import frobenius_norm_sq

KINDS = ("q", "k", "v")


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two matrices with equal row counts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ConfigError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    xx = frobenius_norm_sq(x.T @ x)
    yy = frobenius_norm_sq(y.T @ y)
    if xx == 0.0 or yy == 0.0:
        raise SimilarityUndefinedError("CKA is undefined for an all-zero matrix")
    xy = frobenius_norm_sq(x.T @ y)
    return xy / np.sqrt(xx * yy)


@dataclass
class SimilarityMatrix:
    """Symmetric pairwise-CKA matrix for one layer and projection kind."""

    values: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _heads_of_kind(layer, kind: str) -> np.ndarray:
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    return {"q": layer.w_q, "k": layer.w_k, "v": layer.w_v}[kind]


def head_similarity_matrix(layers, layer_index: int, kind: str) -> SimilarityMatrix:
    """Pairwise CKA between all heads of one kind in one layer."""
    if not 0 <= layer_index < len(layers):
        raise ConfigError(f"layer {layer_index} out of range for {len(layers)} layers")
    heads = _heads_of_kind(layers[layer_index], kind)
    n = heads.shape[0]
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = cka(heads[i], heads[j])
    return SimilarityMatrix(values=values, kind=kind)


def layer_redundancy(sim: SimilarityMatrix) -> float:
    """Mean similarity over all unordered head pairs: 2/(H(H-1)) * sum_{i<j}."""
    n = sim.size
    if n < 2:
        raise ConfigError("redundancy needs at least 2 heads")
    iu = np.triu_indices(n, k=1)
    return float(sim.values[iu].mean())
