"""Behavior-importance perceptron: per-interaction weights for source-domain losses.

The weight of a source interaction (u, v) in source domain S is

    gamma_S * raw(u, v) / mean(raw over the batch's source interactions),
    raw(u, v) = logistic(item_weight(v) * pair_weight(u, v)),

where ``item_weight`` reads the supernet's final item embedding through an MLP
and ``pair_weight`` comes from the perceptron's own two-layer GraphSAGE over
the training graph. Target-domain interactions always have weight 1.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .supernet import EdgeSet, PropGraph, _glorot, _mean_neighbors


def _mlp(in_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class Perceptron(nn.Module):
    def __init__(self, n_nodes: int, n_sources: int, item_dim: int, dim: int = 32,
                 hidden: int = 32, init_std: float = 0.1):
        super().__init__()
        self.gamma_domain = nn.Parameter(torch.ones(n_sources))
        self.item_mlp = _mlp(item_dim, hidden)
        self.node_emb = nn.Parameter(torch.randn(n_nodes, dim) * init_std)
        self.sage_W1 = nn.Parameter(_glorot(dim, 2 * dim))
        self.sage_W2 = nn.Parameter(_glorot(dim, 2 * dim))
        self.pair_mlp = _mlp(2 * dim, hidden)

    def sage_embeddings(self, edges: EdgeSet) -> torch.Tensor:
        h = self.node_emb
        h = F.relu(torch.cat([h, _mean_neighbors(h, edges)], dim=1) @ self.sage_W1.T)
        return torch.cat([h, _mean_neighbors(h, edges)], dim=1) @ self.sage_W2.T

    def raw_scores(self, graph: PropGraph, item_h: torch.Tensor, users, items) -> torch.Tensor:
        """logistic(item weight * user-item weight) for a batch; ``item_h`` is [batch, dim]."""
        users = torch.as_tensor(users, dtype=torch.long)
        items = torch.as_tensor(items, dtype=torch.long)
        h = self.sage_embeddings(graph.all_edges)
        g_item = self.item_mlp(item_h).squeeze(-1)
        g_pair = self.pair_mlp(torch.cat([h[users], h[items + graph.n_users]], dim=1)).squeeze(-1)
        return torch.sigmoid(g_item * g_pair)

    def forward(self, graph: PropGraph, item_h2: torch.Tensor, users, items, domains) -> torch.Tensor:
        return self.batch_weights(graph, item_h2, users, items, domains)

    def batch_weights(self, graph: PropGraph, item_h2: torch.Tensor, users, items, domains) -> torch.Tensor:
        """Loss weights for a mixed batch: 1 on target rows (domain 0), gamma_Si on source rows."""
        domains = torch.as_tensor(domains, dtype=torch.long)
        src = domains > 0
        weights = torch.ones(domains.shape[0], dtype=item_h2.dtype)
        if not bool(src.any()):
            return weights
        users = torch.as_tensor(users, dtype=torch.long)[src]
        items = torch.as_tensor(items, dtype=torch.long)[src]
        raws = self.raw_scores(graph, item_h2[src], users, items)
        gamma = self.gamma_domain[domains[src] - 1]
        return weights.masked_scatter(src, importance_weights(gamma, raws))


def item_global_weight(item_embedding: torch.Tensor, perceptron: Perceptron) -> torch.Tensor:
    return perceptron.item_mlp(item_embedding).squeeze(-1)


def user_item_weight(user: int, item: int, graph: PropGraph, perceptron: Perceptron) -> torch.Tensor:
    if not 0 <= user < graph.n_users:
        raise IndexError(f"user {user} not in graph")
    if not 0 <= item < graph.n_items:
        raise IndexError(f"item {item} not in graph")
    h = perceptron.sage_embeddings(graph.all_edges)
    pair = torch.cat([h[user], h[graph.n_users + item]])
    return perceptron.pair_mlp(pair).squeeze(-1)


def importance_weights(gamma_s: torch.Tensor, raws: torch.Tensor) -> torch.Tensor:
    """gamma_S * raw / batch-mean(raw), elementwise over a batch of source interactions."""
    if raws.numel() == 0:
        raise ValueError("cannot normalise importance over an empty batch")
    return gamma_s * raws / raws.mean()


def combine_importance(gamma_s, gamma_v, gamma_uv, batch_raws) -> torch.Tensor:
    """Weight of one source interaction; ``batch_raws`` must include its own raw score."""
    f64 = lambda x: torch.as_tensor(x, dtype=torch.float64)
    batch_raws = f64(batch_raws)
    if batch_raws.numel() == 0:
        raise ValueError("cannot normalise importance over an empty batch")
    raw = torch.sigmoid(f64(gamma_v) * f64(gamma_uv))
    return f64(gamma_s) * raw / batch_raws.mean()


def bce_terms(predictions: torch.Tensor, labels: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    labels = labels.to(predictions.dtype)
    if from_logits:
        return F.binary_cross_entropy_with_logits(predictions, labels, reduction="none")
    if bool(((predictions <= 0) | (predictions >= 1)).any()):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    return F.binary_cross_entropy(predictions, labels, reduction="none")


def weighted_main_loss(predictions: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                       source_mask: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    """(sum of target BCE + sum of weighted source BCE) / batch size."""
    terms = bce_terms(predictions, labels, from_logits)
    source_mask = torch.as_tensor(source_mask, dtype=torch.bool)
    w = torch.where(source_mask, weights.to(terms.dtype), torch.ones_like(terms))
    return (w * terms).sum() / terms.numel()
