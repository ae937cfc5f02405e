"""Loss terms: BPR, two InfoNCE alignments, and a Gaussian-kernel HSIC penalty.

Gradients come from torch autograd; the finite-difference checks in the test
suite are the independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class KernelConfig:
    bandwidth_mode: str = "median"  # or "fixed"
    sigma_k: float = 1.0
    sigma_m: float = 1.0

    def __post_init__(self):
        if self.bandwidth_mode not in ("median", "fixed"):
            raise ValueError("bandwidth_mode must be 'median' or 'fixed'")
        if self.sigma_k <= 0 or self.sigma_m <= 0:
            raise ValueError("bandwidths must be positive")


@dataclass
class LossBreakdown:
    l_rec: float
    l_prf: float
    l_rel: float
    l_comp: float
    total: float

    def as_row(self) -> list[float]:
        return [self.l_rec, self.l_prf, self.l_rel, self.l_comp, self.total]


@dataclass(frozen=True)
class Ablation:
    no_mi_min: bool = False
    no_mi_max: bool = False
    no_pk: bool = False
    no_rk: bool = False

    @property
    def use_prf(self) -> bool:
        return not (self.no_mi_max or self.no_pk)

    @property
    def use_rel(self) -> bool:
        return not (self.no_mi_max or self.no_rk)

    @property
    def use_comp(self) -> bool:
        return not self.no_mi_min


def bpr_loss(pos: torch.Tensor, neg: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of -log sigmoid(pos - neg), optionally weighted per triple."""
    terms = F.softplus(neg - pos)
    if weights is not None:
        terms = terms * weights
    return terms.mean()


def loss_rec(h: torch.Tensor, triples: torch.Tensor, num_users: int,
             weights: torch.Tensor | None = None) -> torch.Tensor:
    u = h[triples[:, 0]]
    pos = (u * h[num_users + triples[:, 1]]).sum(1)
    neg = (u * h[num_users + triples[:, 2]]).sum(1)
    return bpr_loss(pos, neg, weights)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-normalize; zero rows stay zero and pass no gradient."""
    norm = x.norm(dim=1, keepdim=True)
    ok = norm > 0
    return torch.where(ok, x / torch.where(ok, norm, torch.ones_like(norm)), torch.zeros_like(x))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _unit_rows(a) @ _unit_rows(b).T


def info_nce(anchors: torch.Tensor, targets: torch.Tensor, tau: float,
             include_positive: bool = False) -> torch.Tensor:
    """Per-row InfoNCE losses; row v's positive is targets[v], the rest are negatives.

    By default the positive is left out of the denominator, so values can be
    negative. With fewer than two rows there are no negatives; the loss is 0.
    """
    n = anchors.shape[0]
    if n < 2 and not include_positive:
        return anchors.new_zeros(n)
    logits = cosine_matrix(anchors, targets) / tau
    pos = logits.diagonal()
    if not include_positive:
        eye = torch.eye(n, dtype=torch.bool)
        logits = logits.masked_fill(eye, float("-inf"))
    return torch.logsumexp(logits, dim=1) - pos


def alignment_loss(h: torch.Tensor, targets_users: torch.Tensor, targets_items: torch.Tensor,
                   users: torch.Tensor, items: torch.Tensor, num_users: int, tau: float,
                   include_positive: bool = False) -> torch.Tensor:
    """InfoNCE over batch users and batch items separately, averaged over all of them.

    ``targets_users``/``targets_items`` are row-aligned with ``users``/``items``.
    """
    lu = info_nce(h[users], targets_users, tau, include_positive)
    li = info_nce(h[num_users + items], targets_items, tau, include_positive)
    return (lu.sum() + li.sum()) / max(len(users) + len(items), 1)


def loss_prf(h: torch.Tensor, pref_users: torch.Tensor, pref_items: torch.Tensor,
             users: torch.Tensor, items: torch.Tensor, num_users: int, tau: float,
             include_positive: bool = False) -> torch.Tensor:
    """Align graph representations with projected preference embeddings.

    ``pref_users``/``pref_items`` are full |U| x d and |I| x d matrices.
    """
    return alignment_loss(h, pref_users[users], pref_items[items], users, items, num_users, tau, include_positive)


def loss_rel(h: torch.Tensor, h_rel: torch.Tensor, users: torch.Tensor, items: torch.Tensor,
             num_users: int, tau: float, include_positive: bool = False) -> torch.Tensor:
    """Align representations with the enriched-graph view ``h_rel``."""
    return alignment_loss(h, h_rel[users], h_rel[num_users + items], users, items, num_users, tau,
                          include_positive)


def squared_distances(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)).clamp_min(0.0)
    return d2 * (1.0 - torch.eye(len(x), dtype=x.dtype))


def median_bandwidth(x: torch.Tensor) -> float:
    """Median pairwise Euclidean distance (1.0 if all points coincide)."""
    with torch.no_grad():
        n = len(x)
        iu = torch.triu_indices(n, n, offset=1)
        d = squared_distances(x)[iu[0], iu[1]].sqrt()
        med = float(d.median()) if len(d) else 0.0
    return med if med > 0 else 1.0


def kernel_matrix(points: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """Gaussian kernel exp(-|x - y|^2 / (2 sigma^2))."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return torch.exp(-squared_distances(points) / (2.0 * bandwidth ** 2))


def _center(k: torch.Tensor) -> torch.Tensor:
    return k - k.mean(0, keepdim=True) - k.mean(1, keepdim=True) + k.mean()


def hsic(k: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """trace(HKH HMH) / (n - 1)^2 for symmetric K, M."""
    n = k.shape[0]
    if n < 2 or k.shape != m.shape:
        raise ValueError("hsic needs two n x n matrices with n >= 2")
    return (_center(k) * _center(m)).sum() / (n - 1) ** 2


def hsic_term(h: torch.Tensor, h_masked: torch.Tensor, nodes: torch.Tensor,
              kernel: KernelConfig, bandwidths: tuple[float, float] | None = None) -> torch.Tensor:
    """HSIC between two views of the same node subset (0 for fewer than 2 nodes)."""
    if len(nodes) < 2:
        return h.new_zeros(())
    x, y = h[nodes], h_masked[nodes]
    if bandwidths is not None:
        sk, sm = bandwidths
    elif kernel.bandwidth_mode == "median":
        sk, sm = median_bandwidth(x), median_bandwidth(y)
    else:
        sk, sm = kernel.sigma_k, kernel.sigma_m
    return hsic(kernel_matrix(x, sk), kernel_matrix(y, sm))


def loss_comp(h: torch.Tensor, h_masked: torch.Tensor, users: torch.Tensor, items: torch.Tensor,
              num_users: int, kernel: KernelConfig,
              bandwidths: dict[str, tuple[float, float]] | None = None) -> torch.Tensor:
    """Batch HSIC over users plus batch HSIC over items."""
    bw = bandwidths or {}
    return (hsic_term(h, h_masked, users, kernel, bw.get("users"))
            + hsic_term(h, h_masked, num_users + items, kernel, bw.get("items")))


def total_loss(l_rec, l_prf, l_rel, l_comp, alpha: float, beta: float, ablation: Ablation = Ablation()):
    """l_rec + alpha (l_prf + l_rel) + beta l_comp with ablated terms removed.

    Works on floats and on tensors.
    """
    knowledge = (l_prf if ablation.use_prf else 0.0) + (l_rel if ablation.use_rel else 0.0)
    comp = l_comp if ablation.use_comp else 0.0
    return l_rec + alpha * knowledge + beta * comp
