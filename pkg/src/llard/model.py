"""Backbones (LightGCN, GMF) and the Gumbel-relaxed edge mask generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import InteractionGraph, normalized_adjacency

BACKBONES = ("lightgcn", "gmf")
DELTA_EPS = 1e-6
# keeps d(deg^-1/2)/d(deg) finite when every edge of a node has q ~ 0
DEGREE_EPS = 1e-12


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "lightgcn"
    layers: int = 3
    dim: int = 64

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


@dataclass(frozen=True, eq=False)
class SparseAdj:
    """Undirected edge list with one normalized value per edge (applied both ways)."""

    num_nodes: int
    edges: torch.Tensor  # (m, 2) long
    values: torch.Tensor  # (m,)

    @classmethod
    def from_graph(cls, graph: InteractionGraph, dtype=torch.float32) -> "SparseAdj":
        edges = torch.as_tensor(graph.edges, dtype=torch.long)
        return cls.weighted(graph.num_nodes, edges, torch.as_tensor(graph.weights, dtype=dtype))

    @classmethod
    def weighted(cls, num_nodes: int, edges: torch.Tensor, weights: torch.Tensor) -> "SparseAdj":
        """D^{-1/2} (A*W) D^{-1/2}; differentiable in ``weights``."""
        a, b = edges[:, 0], edges[:, 1]
        deg = torch.zeros(num_nodes, dtype=weights.dtype).index_add(0, a, weights).index_add(0, b, weights)
        safe = torch.where(deg > 0, deg + DEGREE_EPS, torch.ones_like(deg))
        inv = torch.where(deg > 0, safe.rsqrt(), torch.zeros_like(deg))
        return cls(num_nodes, edges, weights * inv[a] * inv[b])

    def to_dense(self) -> torch.Tensor:
        m = torch.zeros(self.num_nodes, self.num_nodes, dtype=self.values.dtype)
        a, b = self.edges[:, 0], self.edges[:, 1]
        m = m.index_put((a, b), self.values, accumulate=True)
        return m.index_put((b, a), self.values, accumulate=True)

    def matmul(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.edges[:, 0], self.edges[:, 1]
        v = self.values.unsqueeze(1)
        return torch.zeros_like(x).index_add(0, a, v * x[b]).index_add(0, b, v * x[a])


class MaskGenerator(nn.Module):
    """Edge logit from the concatenated endpoint embeddings: 2d -> hidden -> 1."""

    def __init__(self, dim: int, hidden: int = 64, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = layer.in_features ** -0.5
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def forward(self, e_u: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(torch.cat([e_u, e_i], dim=1)))).squeeze(1)


def edge_logits(mask: MaskGenerator, table: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    return mask(table[edges[:, 0]], table[edges[:, 1]])


def sample_mask(
    logits: torch.Tensor,
    tau: float,
    generator: torch.Generator | None = None,
    train_mode: bool = True,
    delta: torch.Tensor | None = None,
) -> torch.Tensor:
    """q = sigmoid((log d - log(1-d) + logit) / tau), d ~ U(eps, 1-eps); d = 0.5 in eval."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not train_mode:
        return torch.sigmoid(logits / tau)
    if delta is None:
        delta = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        delta = DELTA_EPS + (1 - 2 * DELTA_EPS) * delta
    noise = torch.log(delta) - torch.log1p(-delta)
    return torch.sigmoid((noise + logits) / tau)


@dataclass(frozen=True, eq=False)
class MaskedGraph:
    base: InteractionGraph
    q: np.ndarray
    adjacency: object  # scipy csr

    @property
    def hard_edges(self) -> np.ndarray:
        return self.base.edges[self.q >= 0.5]


def apply_mask(graph: InteractionGraph, q) -> MaskedGraph:
    """Reweight the graph's edges by ``q`` and renormalize (numpy export path)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(graph.edges),):
        raise ValueError("q must have one entry per edge")
    adj = normalized_adjacency(graph.num_nodes, graph.edges, graph.weights * q)
    return MaskedGraph(graph, q, adj)


def forward_lightgcn(adj: SparseAdj, table: torch.Tensor, layers: int) -> torch.Tensor:
    """Mean of the layer outputs A^0 E, A^1 E, ..., A^L E."""
    h = table
    total = table
    for _ in range(layers):
        h = adj.matmul(h)
        total = total + h
    return total / (layers + 1)


def forward_gmf(table: torch.Tensor, u, i) -> torch.Tensor:
    """Element-wise product summed with unit output weights."""
    return (table[u] * table[i]).sum(-1)


def score_all(h: torch.Tensor, user, num_users: int) -> torch.Tensor:
    return h[user] @ h[num_users:].T


class DenoiseModel(nn.Module):
    """Embedding table, mask generator and (optional) projection head."""

    def __init__(self, num_users: int, num_items: int, config: BackboneConfig,
                 mask_hidden: int = 64, head: nn.Module | None = None, seed: int = 0):
        super().__init__()
        self.num_users, self.num_items, self.config = num_users, num_items, config
        gen = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(0.1 * torch.randn(num_users + num_items, config.dim, generator=gen))
        self.mask = MaskGenerator(config.dim, mask_hidden, gen)
        self.head = head

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items
