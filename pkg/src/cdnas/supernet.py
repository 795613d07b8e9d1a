"""Per-domain continuous GNN supernetwork and the CTR prediction head.

Node layout: users occupy rows ``0..n_users-1``, items follow. Every domain
has its own edge set (train clicks of that domain, used in both directions)
and its own architecture mixture per layer; the per-domain mixtures are summed
into each node's update. Item rows only receive their own domain's update.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

N_LAYERS = 2


class OpKind(str, Enum):
    GCN = "GCN"
    GAT = "GAT"
    SAGE = "SAGE"
    LIGHTGCN = "LIGHTGCN"
    LINEAR = "LINEAR"


ALL_OPS: tuple[OpKind, ...] = tuple(OpKind)


@dataclass
class EdgeSet:
    """Directed message edges (both directions of each user-item pair) of one domain."""

    src: torch.Tensor
    dst: torch.Tensor
    deg: torch.Tensor  # per-node degree within this edge set
    n_nodes: int

    @classmethod
    def from_pairs(cls, users, items, n_users: int, n_nodes: int) -> EdgeSet:
        u = torch.as_tensor(np.asarray(users), dtype=torch.long)
        i = torch.as_tensor(np.asarray(items), dtype=torch.long) + n_users
        src = torch.cat([i, u])
        dst = torch.cat([u, i])
        deg = torch.bincount(dst, minlength=n_nodes).to(torch.get_default_dtype())
        return cls(src, dst, deg, n_nodes)

    @property
    def n_edges(self) -> int:
        return int(self.src.numel())


@dataclass
class PropGraph:
    """Tensor view of an :class:`~cdnas.graph.InteractionGraph` for message passing."""

    n_users: int
    n_items: int
    domains: list[EdgeSet]
    node_masks: torch.Tensor  # [n_domains, n_nodes]; users always 1, items only in own domain
    all_edges: EdgeSet

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @classmethod
    def from_graph(cls, graph, dtype: torch.dtype | None = None) -> PropGraph:
        nu, ni = graph.n_users, graph.n_items
        return cls.from_arrays(nu, ni, np.asarray(graph.item_domain), len(graph.domain_set),
                               [graph.message_edges(d) for d in range(len(graph.domain_set))], dtype)

    @classmethod
    def from_arrays(cls, n_users: int, n_items: int, item_domain, n_domains: int,
                    edges_per_domain: Sequence[tuple], dtype: torch.dtype | None = None) -> PropGraph:
        dtype = dtype or torch.get_default_dtype()
        n = n_users + n_items
        sets = [EdgeSet.from_pairs(u, i, n_users, n) for u, i in edges_per_domain]
        item_domain = torch.as_tensor(np.array(item_domain), dtype=torch.long)
        masks = torch.ones(n_domains, n, dtype=dtype)
        for d in range(n_domains):
            masks[d, n_users:] = (item_domain == d).to(dtype)
        all_u = np.concatenate([np.asarray(u) for u, _ in edges_per_domain]) if edges_per_domain else []
        all_i = np.concatenate([np.asarray(i) for _, i in edges_per_domain]) if edges_per_domain else []
        for s in sets:
            s.deg = s.deg.to(dtype)
        union = EdgeSet.from_pairs(all_u, all_i, n_users, n)
        union.deg = union.deg.to(dtype)
        return cls(n_users, n_items, sets, masks, union)


# ---------------------------------------------------------------------------
# candidate operations


def _sym_norm_sum(h: torch.Tensor, es: EdgeSet) -> torch.Tensor:
    if es.n_edges == 0:
        return torch.zeros_like(h)
    inv = es.deg.to(h.dtype).clamp(min=1.0).rsqrt()
    coef = inv[es.src] * inv[es.dst]
    return torch.zeros_like(h).index_add(0, es.dst, h[es.src] * coef[:, None])


def _mean_neighbors(h: torch.Tensor, es: EdgeSet) -> torch.Tensor:
    if es.n_edges == 0:
        return torch.zeros_like(h)
    total = torch.zeros_like(h).index_add(0, es.dst, h[es.src])
    return total / es.deg.to(h.dtype).clamp(min=1.0)[:, None]


def segment_softmax(scores: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``scores`` within groups sharing the same ``index``."""
    top = torch.full((n,), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, index, scores, reduce="amax", include_self=True)
    ex = torch.exp(scores - top[index].detach())
    den = torch.zeros(n, dtype=scores.dtype).index_add(0, index, ex)
    return ex / den[index]


def _gat(h, es: EdgeSet, p) -> torch.Tensor:
    z = h @ p["gat_W"].T
    if es.n_edges == 0:
        return torch.zeros_like(z)
    e = F.leaky_relu(z[es.src] @ p["gat_a_src"] + z[es.dst] @ p["gat_a_dst"], 0.2)
    alpha = segment_softmax(e, es.dst, es.n_nodes)
    return torch.zeros_like(z).index_add(0, es.dst, z[es.src] * alpha[:, None])


def candidate_op_apply(kind: OpKind | str, h: torch.Tensor, edges: EdgeSet,
                       params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """One bidirectional propagation step of a single candidate operation."""
    kind = OpKind(kind)
    if h.shape[0] != edges.n_nodes:
        raise ValueError(f"features cover {h.shape[0]} nodes but the edge set references {edges.n_nodes}")
    if kind is OpKind.LIGHTGCN:
        return _sym_norm_sum(h, edges)
    if kind is OpKind.GCN:
        return _sym_norm_sum(h, edges) @ params["gcn_W"].T
    if kind is OpKind.GAT:
        return _gat(h, edges, params)
    if kind is OpKind.SAGE:
        return torch.cat([h, _mean_neighbors(h, edges)], dim=1) @ params["sage_W"].T
    return h @ params["linear_W"].T + params["linear_b"]


def arch_probs(logits: torch.Tensor, layer: int, domain: int) -> torch.Tensor:
    return torch.softmax(logits[layer, domain], dim=-1)


def discretize_arch(weights: torch.Tensor) -> torch.Tensor:
    """One-hot at the argmax of every (layer, domain) row; ties go to the lowest index."""
    w = torch.as_tensor(weights)
    if not w.is_floating_point():
        w = w.to(torch.get_default_dtype())
    # torch.argmax returns the first maximal index
    idx = torch.argmax(w, dim=-1, keepdim=True)
    return torch.zeros_like(w).scatter(-1, idx, 1.0)


def mixed_layer(h: torch.Tensor, graph: PropGraph, probs: torch.Tensor,
                params: Mapping[str, torch.Tensor], ops: Sequence[OpKind] = ALL_OPS) -> torch.Tensor:
    """Sum over domains of the domain's op mixture; ``probs`` is [n_domains, len(ops)]."""
    out = torch.zeros(h.shape[0], _out_dim(h, params, ops), dtype=h.dtype)
    for d, es in enumerate(graph.domains):
        mix = sum(probs[d, k] * candidate_op_apply(op, h, es, params) for k, op in enumerate(ops))
        out = out + graph.node_masks[d].to(h.dtype)[:, None] * mix
    return out


def _out_dim(h, params, ops) -> int:
    for op, key in ((OpKind.GCN, "gcn_W"), (OpKind.GAT, "gat_W"), (OpKind.SAGE, "sage_W"),
                    (OpKind.LINEAR, "linear_W")):
        if op in ops and key in params:
            return params[key].shape[0]
    return h.shape[1]


def forward_embeddings(graph: PropGraph, h0: torch.Tensor, layer_probs: Sequence[torch.Tensor],
                       params: Mapping[str, torch.Tensor], ops: Sequence[OpKind] = ALL_OPS) -> torch.Tensor:
    """Stack [h0, h1, h2] of shape [3, n_nodes, dim]."""
    levels = [h0]
    for probs in layer_probs:
        levels.append(mixed_layer(levels[-1], graph, probs, params, ops))
    return torch.stack(levels)


def concat_multi_order(user_stack: torch.Tensor, item_stack: torch.Tensor) -> torch.Tensor:
    """Concatenate user levels 0..2 then item levels 0..2.

    Stacks are [levels, dim] for one pair or [batch, levels, dim].
    """
    if user_stack.shape[-2] != N_LAYERS + 1 or item_stack.shape[-2] != N_LAYERS + 1:
        raise ValueError(f"expected {N_LAYERS + 1} embedding levels, got "
                         f"{user_stack.shape[-2]} and {item_stack.shape[-2]}")
    return torch.cat([user_stack.flatten(-2), item_stack.flatten(-2)], dim=-1)


class CTRHead(nn.Module):
    def __init__(self, in_dim: int, widths: Sequence[int] = (128, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        layers.append(nn.Linear(prev, 1))
        self.mlp = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Click logits."""
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"head expects width {self.in_dim}, got {features.shape[-1]}")
        return self.mlp(features).squeeze(-1)

    @property
    def final(self) -> nn.Linear:
        return self.mlp[-1]


def predict_ctr(features: torch.Tensor, head: CTRHead) -> torch.Tensor:
    return torch.sigmoid(head(features))


class Supernet(nn.Module):
    """Embeddings, shared candidate-op parameters, per-(layer, domain) logits and CTR head."""

    def __init__(self, n_users: int, n_items: int, n_domains: int, dim: int = 64,
                 head_widths: Sequence[int] = (128, 64), ops: Sequence[OpKind | str] = ALL_OPS,
                 init_std: float = 0.1):
        super().__init__()
        self.ops = tuple(OpKind(o) for o in ops)
        if not self.ops:
            raise ValueError("need at least one candidate operation")
        self.n_users, self.n_items, self.n_domains, self.dim = n_users, n_items, n_domains, dim
        self.user_emb = nn.Parameter(torch.randn(n_users, dim) * init_std)
        self.item_emb = nn.Parameter(torch.randn(n_items, dim) * init_std)
        # one parameter set per op, shared by both layers
        if OpKind.GCN in self.ops:
            self.gcn_W = nn.Parameter(_glorot(dim, dim))
        if OpKind.GAT in self.ops:
            self.gat_W = nn.Parameter(_glorot(dim, dim))
            self.gat_a_src = nn.Parameter(torch.randn(dim) * init_std)
            self.gat_a_dst = nn.Parameter(torch.randn(dim) * init_std)
        if OpKind.SAGE in self.ops:
            self.sage_W = nn.Parameter(_glorot(dim, 2 * dim))
        if OpKind.LINEAR in self.ops:
            self.linear_W = nn.Parameter(_glorot(dim, dim))
            self.linear_b = nn.Parameter(torch.zeros(dim))
        self.arch_logits = nn.Parameter(torch.zeros(N_LAYERS, n_domains, len(self.ops)))
        self.register_buffer("fixed_probs", None)
        self.head = CTRHead(6 * dim, head_widths)

    def op_params(self) -> dict[str, torch.Tensor]:
        names = ("gcn_W", "gat_W", "gat_a_src", "gat_a_dst", "sage_W", "linear_W", "linear_b")
        return {n: getattr(self, n) for n in names if hasattr(self, n)}

    def fix_arch(self, probs: torch.Tensor | None) -> None:
        """Freeze the mixture to ``probs`` [layers, domains, ops]; None restores softmax(logits)."""
        if probs is None:
            self.fixed_probs = None
            self.arch_logits.requires_grad_(True)
            return
        probs = torch.as_tensor(probs, dtype=self.arch_logits.dtype)
        if probs.shape != self.arch_logits.shape:
            raise ValueError(f"fixed mixture has shape {tuple(probs.shape)}, expected {tuple(self.arch_logits.shape)}")
        self.fixed_probs = probs.clone()
        self.arch_logits.requires_grad_(False)

    def mixture(self) -> torch.Tensor:
        if self.fixed_probs is not None:
            return self.fixed_probs
        return torch.softmax(self.arch_logits, dim=-1)

    def embeddings(self, graph: PropGraph) -> torch.Tensor:
        h0 = torch.cat([self.user_emb, self.item_emb])
        probs = self.mixture()
        return forward_embeddings(graph, h0, [probs[i] for i in range(N_LAYERS)], self.op_params(), self.ops)

    def score(self, stack: torch.Tensor, users, items) -> torch.Tensor:
        """Click logits for (user, item) index pairs given a precomputed embedding stack."""
        users = torch.as_tensor(users, dtype=torch.long)
        items = torch.as_tensor(items, dtype=torch.long) + self.n_users
        feats = concat_multi_order(stack[:, users].transpose(0, 1), stack[:, items].transpose(0, 1))
        return self.head(feats)

    def forward(self, graph: PropGraph, users, items, return_stack: bool = False):
        stack = self.embeddings(graph)
        logits = self.score(stack, users, items)
        return (logits, stack) if return_stack else logits

    def arch_report(self, op_names: Sequence[str] | None = None, domain_names: Sequence[str] | None = None):
        probs = self.mixture().detach().cpu().double()
        ops = [o.value for o in self.ops]
        doms = list(domain_names) if domain_names else [str(d) for d in range(self.n_domains)]
        return {f"layer{i + 1}": {doms[d]: {ops[k]: float(probs[i, d, k]) for k in range(len(ops))}
                                  for d in range(self.n_domains)}
                for i in range(N_LAYERS)}


def _glorot(fan_out: int, fan_in: int) -> torch.Tensor:
    w = torch.empty(fan_out, fan_in)
    nn.init.xavier_uniform_(w)
    return w
