"""Light graph convolution over the joint user/item node set.

Node ``u`` is user ``u``; node ``n_users + i`` is item ``i``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionDataset


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric D^-1/2 A D^-1/2 over users+items in CSR form."""

    n_users: int
    n_items: int
    matrix: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def matmul(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_normalized_adjacency(dataset: InteractionDataset, dtype=np.float64) -> NormalizedAdjacency:
    """Normalized bipartite operator from train edges; zero-degree nodes get empty rows."""
    edges = dataset.train_edges
    if len(edges) == 0:
        raise PropagationError("cannot build an adjacency operator without train edges")
    n_users, n_nodes = dataset.n_users, dataset.n_nodes
    rows = np.concatenate([edges[:, 0], edges[:, 1] + n_users])
    cols = np.concatenate([edges[:, 1] + n_users, edges[:, 0]])
    degrees = np.bincount(rows, minlength=n_nodes)

    # CSR by hand: stable sort on (row, col) gives deterministic layout
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(degrees, out=indptr[1:])
    inv_sqrt = 1.0 / np.sqrt(degrees[rows] * degrees[cols].astype(np.float64))
    matrix = sp.csr_matrix(
        (inv_sqrt.astype(dtype), cols.astype(np.int32), indptr.astype(np.int32)),
        shape=(n_nodes, n_nodes),
    )
    matrix.has_sorted_indices = True
    return NormalizedAdjacency(dataset.n_users, dataset.n_items, matrix, degrees)


@dataclass
class EmbeddingState:
    base: np.ndarray
    layer_weights: np.ndarray
    layer_embeddings: list[np.ndarray] = field(default_factory=list)
    final: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.base)
        if self.v is None:
            self.v = np.zeros_like(self.base)

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights) - 1

    def refresh(self, adj: NormalizedAdjacency) -> np.ndarray:
        """Recompute per-layer and combined embeddings from the current base."""
        self.layer_embeddings = propagate(adj, self.base, self.n_layers)
        self.final = combine_layers(self.layer_embeddings, self.layer_weights)
        return self.final

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(
            base=self.base.copy(),
            layer_weights=self.layer_weights.copy(),
            layer_embeddings=[e.copy() for e in self.layer_embeddings],
            final=None if self.final is None else self.final.copy(),
            m=self.m.copy(),
            v=self.v.copy(),
            step=self.step,
        )


def uniform_layer_weights(n_layers: int) -> np.ndarray:
    return np.full(n_layers + 1, 1.0 / (n_layers + 1))


def init_embeddings(
    n_nodes: int,
    d: int,
    seed: int,
    n_layers: int = 3,
    layer_weights=None,
    dtype=np.float64,
) -> EmbeddingState:
    """Base embeddings drawn i.i.d. from N(0, 0.1^2); Adam moments start at zero."""
    if d < 1:
        raise ValueError(f"embedding dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 0.1, size=(n_nodes, d)).astype(dtype)
    weights = uniform_layer_weights(n_layers) if layer_weights is None else np.asarray(layer_weights, float)
    if len(weights) != n_layers + 1:
        raise ValueError(f"expected {n_layers + 1} layer weights, got {len(weights)}")
    return EmbeddingState(base=base, layer_weights=weights)


def propagate(adj: NormalizedAdjacency, base: np.ndarray, n_layers: int) -> list[np.ndarray]:
    """Return [E^0, ..., E^K] with E^{k+1} = A_hat E^k."""
    if n_layers < 0:
        raise ValueError(f"layer count must be >= 0, got {n_layers}")
    layers = [base]
    for _ in range(n_layers):
        layers.append(adj.matmul(layers[-1]))
    if not np.isfinite(layers[-1]).all():
        raise PropagationError("non-finite embedding after propagation; training has diverged")
    return layers


def combine_layers(layer_embeddings: list[np.ndarray], weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(layer_embeddings):
        raise ValueError(f"{len(weights)} layer weights for {len(layer_embeddings)} layers")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"layer weights must sum to 1, got {weights.sum()!r}")
    weights = weights.astype(np.result_type(layer_embeddings[0].dtype, np.float32))
    final = weights[0] * layer_embeddings[0]
    for w, layer in zip(weights[1:], layer_embeddings[1:]):
        final = final + w * layer
    return final


def backward_layers(adj: NormalizedAdjacency, layer_grads: list[np.ndarray]) -> np.ndarray:
    """Gradient w.r.t. E^0 given gradients w.r.t. each E^k: sum_k A_hat^k G_k.

    A_hat is symmetric, so the adjoint of k propagation steps is k steps again.
    Evaluated Horner-style with K sparse products.
    """
    acc = layer_grads[-1]
    for g in reversed(layer_grads[:-1]):
        acc = adj.matmul(acc) + g
    return acc


def backward_from_rows(adj: NormalizedAdjacency, nodes: np.ndarray, layer_grads: list[np.ndarray]) -> np.ndarray:
    """Same as :func:`backward_layers` when every G_k is zero outside the rows ``nodes``.

    ``nodes`` must be unique and ``layer_grads[k]`` holds G_k restricted to them.
    The first adjoint hop then only needs the adjacency rows of ``nodes``
    (A_hat[:, S] = A_hat[S, :].T by symmetry).
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    n_layers = len(layer_grads) - 1
    if n_layers == 0:
        out = np.zeros((adj.n_nodes, layer_grads[0].shape[1]), dtype=layer_grads[0].dtype)
        out[nodes] = layer_grads[0]
        return out
    acc = np.asarray(adj.matrix[nodes].T @ layer_grads[-1])
    acc[nodes] += layer_grads[-2]
    for g in reversed(layer_grads[:-2]):
        acc = adj.matmul(acc)
        acc[nodes] += g
    return acc


def backward(adj: NormalizedAdjacency, grad_final: np.ndarray, weights) -> np.ndarray:
    if grad_final.shape[0] != adj.n_nodes:
        raise ValueError(f"gradient has {grad_final.shape[0]} rows, operator has {adj.n_nodes} nodes")
    weights = np.asarray(weights, dtype=np.float64)
    return backward_layers(adj, [w * grad_final for w in weights])


_EXPORT_HEADER = struct.Struct("<II")


def export_embeddings(final: np.ndarray, dataset: InteractionDataset, path) -> None:
    """Write little-endian f32 rows prefixed by (n_nodes, d) and a JSON token index."""
    path = Path(path)
    final = np.ascontiguousarray(final, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EXPORT_HEADER.pack(*final.shape))
        fh.write(final.tobytes())
    index = {
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "users": dataset.user_map,
        "items": {tok: dataset.n_users + i for tok, i in dataset.item_map.items()},
    }
    Path(f"{path}.index.json").write_text(json.dumps(index, sort_keys=True) + "\n")


def load_embeddings(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _EXPORT_HEADER.size:
        raise ValueError(f"{path}: truncated embedding file")
    n, d = _EXPORT_HEADER.unpack_from(blob)
    if len(blob) != _EXPORT_HEADER.size + 4 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} f32 rows, file size is {len(blob)} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=_EXPORT_HEADER.size).reshape(n, d).astype(np.float64)
