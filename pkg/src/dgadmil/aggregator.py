"""Dual graph attention aggregator.

The spatial aggregator turns each instance's C x H x W feature map into a
C-vector by attention over its H*W positions; the instance aggregator turns
the K instance vectors of a bag into the bag embedding z with per-instance
contribution scores s. Either stage can be replaced by plain averaging, which
is how the ablation variants are built.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

from .gat import GatConfig, GATBlock, cosine_edges, grid_edges
from .volume_synth import ConfigError


@dataclass
class SpatialAttention:
    score_map: torch.Tensor  # (..., H, W), sums to 1 over positions
    pooled: torch.Tensor  # (..., C)


@dataclass
class BagEmbedding:
    z: torch.Tensor  # (..., C)
    instance_scores: torch.Tensor  # (..., K)


def attention_pool(score_map: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Per-channel weighted sum over positions: (G, H, W) x (G, C, H, W) -> (G, C)."""
    return torch.einsum("ghw,gchw->gc", score_map, e)


def _softmax_pool(logits: torch.Tensor, values: torch.Tensor, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted sum of ``values`` along ``dim``, normalized after summing.

    Same value as weighting by softmax(logits) first, but equal logits give
    exactly ``values.sum(dim) / count``, i.e. plain averaging to the last bit.
    The normalizer adds the exponentials in sorted order, so reordering the
    inputs reorders the weights without changing a single bit of them.
    ``logits`` must broadcast against ``values``.
    """
    peak = logits.amax(dim=dim, keepdim=True).detach()
    ex = torch.exp(logits - peak)
    denom = ex.sort(dim=dim).values.sum(dim=dim, keepdim=True)
    pooled = (ex * values).sum(dim=dim) / denom.squeeze(dim)
    return pooled, ex / denom


class SpatialAggregator(nn.Module):
    def __init__(self, channels: int, cfg: GatConfig = GatConfig(), graph: str = "cosine"):
        super().__init__()
        if graph not in ("cosine", "grid"):
            raise ConfigError(f"spatial graph must be 'cosine' or 'grid', got {graph!r}")
        self.cfg = cfg
        self.graph = graph
        self.block = GATBlock(channels, cfg)
        self.score = nn.Linear(self.block.out_width, 1)

    def zero_score_head(self) -> None:
        with torch.no_grad():
            self.score.weight.zero_()
            self.score.bias.zero_()

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(G, C, H, W) -> pooled (G, C), score map (G, H, W)."""
        G, C, H, W = e.shape
        nodes = e.flatten(2).transpose(1, 2)  # (G, P, C)
        if self.graph == "cosine":
            edges = cosine_edges(nodes, self.cfg.n_edges, self.cfg.edge_mode)
        else:
            edges = grid_edges(G, H, W, device=e.device)
        h = self.block(nodes.reshape(G * H * W, C), edges)
        logits = self.score(h).view(G, 1, H * W)
        pooled, g = _softmax_pool(logits, e.flatten(2), -1)
        return pooled, g.view(G, H, W)


class InstanceAggregator(nn.Module):
    def __init__(self, channels: int, cfg: GatConfig = GatConfig()):
        super().__init__()
        self.cfg = cfg
        self.block = GATBlock(channels, cfg)
        self.w = nn.Linear(self.block.out_width, 1, bias=False)

    def zero_score_head(self) -> None:
        with torch.no_grad():
            self.w.weight.zero_()

    def forward(self, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, K, C) -> z (B, C), scores (B, K)."""
        B, K, C = g.shape
        edges = cosine_edges(g, self.cfg.n_edges, self.cfg.edge_mode)
        h = self.block(g.reshape(B * K, C), edges)
        z, s = _softmax_pool(self.w(h).view(B, K, 1), g, 1)
        return z, s.view(B, K)


class DualAggregator(nn.Module):
    def __init__(
        self,
        channels: int,
        spatial_cfg: GatConfig = GatConfig(),
        instance_cfg: GatConfig = GatConfig(),
        use_spatial: bool = True,
        use_instance: bool = True,
        spatial_graph: str = "cosine",
    ):
        super().__init__()
        self.spatial = SpatialAggregator(channels, spatial_cfg, spatial_graph) if use_spatial else None
        self.instance = InstanceAggregator(channels, instance_cfg) if use_instance else None

    def zero_score_heads(self) -> None:
        for agg in (self.spatial, self.instance):
            if agg is not None:
                agg.zero_score_head()

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, K, C, H, W) -> z (B, C), instance scores (B, K), spatial maps (B, K, H, W)."""
        B, K, C, H, W = e.shape
        if self.spatial is not None:
            pooled, maps = self.spatial(e.reshape(B * K, C, H, W))
            pooled, maps = pooled.view(B, K, C), maps.view(B, K, H, W)
        else:
            pooled = e.mean(dim=(-2, -1))
            maps = torch.full((B, K, H, W), 1.0 / (H * W), dtype=e.dtype, device=e.device)
        if self.instance is not None:
            z, s = self.instance(pooled)
        else:
            z = pooled.mean(dim=1)
            s = torch.full((B, K), 1.0 / K, dtype=e.dtype, device=e.device)
        return z, s, maps


def spatial_aggregate(agg: SpatialAggregator, e: torch.Tensor) -> SpatialAttention:
    """Aggregate one (C, H, W) map, or a batch (G, C, H, W)."""
    single = e.dim() == 3
    pooled, maps = agg(e.unsqueeze(0) if single else e)
    if single:
        pooled, maps = pooled[0], maps[0]
    return SpatialAttention(maps, pooled)


def instance_aggregate(agg: InstanceAggregator, g: torch.Tensor) -> BagEmbedding:
    """Aggregate one bag's (K, C) instance vectors, or a batch (B, K, C)."""
    single = g.dim() == 2
    if g.shape[-2] == 1:
        warnings.warn("bag with a single instance: score is 1 and z is that instance", stacklevel=2)
    z, s = agg(g.unsqueeze(0) if single else g)
    return BagEmbedding(z[0], s[0]) if single else BagEmbedding(z, s)


def dual_aggregate(agg: DualAggregator, maps: torch.Tensor) -> tuple[BagEmbedding, SpatialAttention]:
    """(K, C, H, W) feature maps of one bag -> bag embedding and per-instance spatial attention."""
    z, s, spatial = agg(maps.unsqueeze(0))
    if agg.spatial is not None:
        pooled = attention_pool(spatial[0], maps)
    else:
        pooled = maps.mean(dim=(-2, -1))
    return BagEmbedding(z[0], s[0]), SpatialAttention(spatial[0], pooled)
