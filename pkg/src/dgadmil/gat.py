"""Multi-head graph attention over edge lists, and cosine-similarity graphs.

Edges are stored as a ``(2, E)`` long tensor whose rows are ``(target, source)``:
information flows from ``source`` into ``target``. Several graphs can be packed
into one edge list by offsetting node indices, which is how the aggregators
batch all instances of all bags into a single call.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume_synth import ConfigError

log = logging.getLogger(__name__)

EDGE_MODES = ("lowest", "highest")


class GraphStructureError(ValueError):
    pass


@dataclass(frozen=True)
class GatConfig:
    heads: int = 8
    d_k: int | None = None  # None: input width // heads
    negative_slope: float = 0.2
    n_edges: int = 8
    edge_mode: str = "lowest"
    ffn_mult: int = 2

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        if self.n_edges < 0:
            raise ConfigError("n_edges must be >= 0")

    def head_width(self, d_in: int) -> int:
        return self.d_k if self.d_k is not None else max(1, d_in // self.heads)


@dataclass
class AttentionGraph:
    node_count: int
    edges: torch.Tensor  # (2, E) rows: target, source

    def neighbors(self, i: int) -> list[int]:
        tgt, src = self.edges
        return src[tgt == i].tolist()

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(t), int(s)) for t, s in self.edges.t()}


def cosine_matrix(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Pairwise cosine similarity over the last axis; zero vectors give 0."""
    norm = x.norm(dim=-1, keepdim=True)
    unit = torch.where(norm > eps, x / norm.clamp_min(eps), torch.zeros_like(x))
    return unit @ unit.transpose(-1, -2)


def cosine_edges(x: torch.Tensor, n_edges: int, mode: str = "lowest") -> torch.Tensor:
    """Packed edge list for a batch of graphs ``x`` of shape (G, N, D).

    Node i receives edges from the ``n_edges`` other nodes with the lowest (or
    highest) cosine similarity to it, ties broken by ascending index, plus a
    self-loop. Node indices are offset by ``g * N`` for graph g.
    """
    if mode not in EDGE_MODES:
        raise ConfigError(f"edge mode must be one of {EDGE_MODES}, got {mode!r}")
    G, N, _ = x.shape
    n = min(n_edges, N - 1)
    device = x.device
    base = torch.arange(N, device=device)
    if n > 0:
        sim = cosine_matrix(x.detach())
        key = sim if mode == "lowest" else -sim
        # self goes last so it is never selected among the n
        key = key.masked_fill(torch.eye(N, dtype=torch.bool, device=device), float("inf"))
        order = torch.sort(key, dim=-1, stable=True).indices[..., :n]  # (G, N, n)
        tgt = base.view(1, N, 1).expand(G, N, n)
        src = order
        tgt = torch.cat([tgt.reshape(G, -1), base.expand(G, N)], dim=1)
        src = torch.cat([src.reshape(G, -1), base.expand(G, N)], dim=1)
    else:
        tgt = base.expand(G, N)
        src = base.expand(G, N)
    offset = (torch.arange(G, device=device) * N).view(G, 1)
    return torch.stack([(tgt + offset).reshape(-1), (src + offset).reshape(-1)])


def build_graph_cosine(features: torch.Tensor, n_edges: int = 8, mode: str = "lowest") -> AttentionGraph:
    features = torch.as_tensor(features)
    if features.dim() != 2:
        raise ConfigError(f"expected (nodes, width) features, got shape {tuple(features.shape)}")
    N = features.shape[0]
    if N == 1:
        warnings.warn("single-node graph: only a self-loop is created", stacklevel=2)
    return AttentionGraph(N, cosine_edges(features.unsqueeze(0), n_edges, mode))


def grid_edges(G: int, H: int, W: int, device=None) -> torch.Tensor:
    """Packed 4-neighbour grid edges (plus self-loops) for G maps of H x W."""
    idx = torch.arange(H * W, device=device).view(H, W)
    pairs = [(idx.reshape(-1), idx.reshape(-1))]
    for a, b in ((idx[1:], idx[:-1]), (idx[:, 1:], idx[:, :-1])):
        pairs += [(a.reshape(-1), b.reshape(-1)), (b.reshape(-1), a.reshape(-1))]
    tgt = torch.cat([p[0] for p in pairs])
    src = torch.cat([p[1] for p in pairs])
    offset = (torch.arange(G, device=device) * H * W).view(G, 1)
    return torch.stack([(tgt + offset).reshape(-1), (src + offset).reshape(-1)])


def check_graph(edges: torch.Tensor, node_count: int) -> None:
    incoming = torch.bincount(edges[0], minlength=node_count)
    if bool((incoming == 0).any()):
        empty = torch.nonzero(incoming == 0).flatten()[:5].tolist()
        raise GraphStructureError(f"nodes without incoming edges: {empty}")


class GATLayer(nn.Module):
    """Multi-head attention: v^k = W^k h, score LeakyReLU(a^k . [v_i^k || v_j^k])."""

    def __init__(self, d_in: int, heads: int = 8, d_k: int | None = None, negative_slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.d_k = d_k if d_k is not None else max(1, d_in // heads)
        self.negative_slope = negative_slope
        self.W = nn.Linear(d_in, heads * self.d_k, bias=False)
        # a^k split into the half acting on v_i (target) and on v_j (source)
        self.a_dst = nn.Parameter(torch.empty(heads, self.d_k))
        self.a_src = nn.Parameter(torch.empty(heads, self.d_k))
        nn.init.xavier_uniform_(self.W.weight)
        nn.init.xavier_uniform_(self.a_dst)
        nn.init.xavier_uniform_(self.a_src)

    @property
    def out_width(self) -> int:
        return self.heads * self.d_k

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.W(h).view(h.shape[0], self.heads, self.d_k)

    def forward(self, h: torch.Tensor, edges: torch.Tensor, return_alpha: bool = False):
        v = self.project(h)
        alpha = gat_scores(self, h, edges, v=v)
        out = gat_aggregate(self, h, alpha, edges, v=v)
        return (out, alpha) if return_alpha else out


def gat_scores(layer: GATLayer, h: torch.Tensor, edges: torch.Tensor, v: torch.Tensor | None = None) -> torch.Tensor:
    """Attention coefficients, shape (E, heads); softmax over each target's edges."""
    if h.shape[-1] != layer.W.in_features:
        raise ConfigError(f"feature width {h.shape[-1]} != layer input width {layer.W.in_features}")
    N = h.shape[0]
    check_graph(edges, N)
    if v is None:
        v = layer.project(h)
    tgt, src = edges
    s_dst = (v * layer.a_dst).sum(-1)  # (N, heads)
    s_src = (v * layer.a_src).sum(-1)
    logits = F.leaky_relu(s_dst[tgt] + s_src[src], layer.negative_slope)  # (E, heads)
    peak = torch.full((N, layer.heads), float("-inf"), dtype=logits.dtype, device=logits.device)
    peak = peak.scatter_reduce(0, tgt.unsqueeze(1).expand_as(logits), logits, "amax", include_self=True)
    ex = torch.exp(logits - peak[tgt].detach())
    denom = torch.zeros_like(peak).index_add(0, tgt, ex)
    return ex / denom[tgt]


def gat_aggregate(
    layer: GATLayer, h: torch.Tensor, alpha: torch.Tensor, edges: torch.Tensor, v: torch.Tensor | None = None
) -> torch.Tensor:
    """h~_i = concat_k sum_{j in N_i} alpha^k_ij v^k_j, shape (N, heads * d_k)."""
    if v is None:
        v = layer.project(h)
    if alpha.shape != (edges.shape[1], layer.heads):
        raise ConfigError(f"alpha shape {tuple(alpha.shape)} != ({edges.shape[1]}, {layer.heads})")
    tgt, src = edges
    msg = alpha.unsqueeze(-1) * v[src]
    out = torch.zeros_like(v).index_add(0, tgt, msg)
    return out.reshape(h.shape[0], layer.out_width)


class GATBlock(nn.Module):
    """out = LN(skip(x) + GAT(x)); out = LN(out + FFN(out))."""

    def __init__(self, d_in: int, cfg: GatConfig = GatConfig()):
        super().__init__()
        self.attn = GATLayer(d_in, cfg.heads, cfg.head_width(d_in), cfg.negative_slope)
        d = self.attn.out_width
        self.skip = nn.Identity() if d == d_in else nn.Linear(d_in, d, bias=False)
        self.ln1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_mult * d), nn.ReLU(), nn.Linear(cfg.ffn_mult * d, d))
        self.ln2 = nn.LayerNorm(d)

    @property
    def out_width(self) -> int:
        return self.attn.out_width

    def zero_branches(self) -> None:
        """Zero the attention projection and FFN output so only the residual path remains."""
        with torch.no_grad():
            self.attn.W.weight.zero_()
            self.ffn[-1].weight.zero_()
            self.ffn[-1].bias.zero_()

    def forward(self, x: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        out = self.ln1(self.skip(x) + self.attn(x, edges))
        return self.ln2(out + self.ffn(out))


def gat_block_forward(block: GATBlock, features: torch.Tensor, graph: AttentionGraph) -> torch.Tensor:
    return block(features, graph.edges)
