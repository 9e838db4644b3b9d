"""Hierarchical traffic-state representation.

Per-view graph convolution (adjacency * features * weights), ego-row
extraction, and assembly of the vehicle state vector: the concatenated
micro/meso/macro graph embeddings followed by the location bit vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hexgraph import FEATURE_DIMS, LEVELS


@dataclass
class GcnParams:
    """One projection matrix per view, feature_dim x d_g."""

    weights: dict[str, Tensor]

    @property
    def d_g(self) -> int:
        return next(iter(self.weights.values())).shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {f"gcn/{level}/w": w for level, w in self.weights.items()}


def init_gcn_params(rng: np.random.Generator, d_g: int) -> GcnParams:
    weights = {}
    for level in LEVELS:
        m = FEATURE_DIMS[level]
        weights[level] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, d_g)), requires_grad=True)
    return GcnParams(weights)


def gcn_params_from_arrays(params: dict[str, np.ndarray], trainable: bool = False) -> GcnParams:
    return GcnParams(
        {level: Tensor(params[f"gcn/{level}/w"], requires_grad=trainable) for level in LEVELS}
    )


def gcn_view(adjacency: np.ndarray, features, weights, self_loops: bool = True) -> Tensor:
    """adjacency @ features @ weights, with optional A := A + I augmentation.

    The literal form (self_loops=False) discards each node's own features;
    the default keeps them so the ego cell's state reaches its embedding.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ad.ShapeError("gcn_view adjacency", adj.shape)
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[0] != adj.shape[0]:
        raise ad.ShapeError("gcn_view", adj.shape, x.shape)
    if self_loops:
        adj = adj + np.eye(adj.shape[0])
    return ad.matmul(ad.matmul(Tensor(adj), x), weights)


def multiview_embed(
    adjacency: dict[str, np.ndarray],
    features: dict[str, np.ndarray | Tensor],
    ego_index: dict[str, int],
    params: GcnParams,
    self_loops: bool = True,
) -> Tensor:
    """Ego-cell rows of the per-view GCN outputs, concatenated micro|meso|macro."""
    rows = []
    for level in LEVELS:
        if level not in ego_index:
            raise ValueError(f"ego cell missing for view {level!r}")
        out = gcn_view(adjacency[level], features[level], params.weights[level], self_loops)
        rows.append(ad.row(out, ego_index[level]))
    return ad.concat(rows, axis=-1)


def state_embed(emb_graph, emb_loc) -> Tensor:
    """State vector: graph embedding first, location bits after."""
    g = emb_graph if isinstance(emb_graph, Tensor) else Tensor(emb_graph)
    loc = emb_loc if isinstance(emb_loc, Tensor) else Tensor(emb_loc)
    return ad.concat([g, loc], axis=-1)
