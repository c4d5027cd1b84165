"""Full network: backbone -> (decoupler) -> shared dual aggregator -> age head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .aggregator import DualAggregator
from .backbone import BackboneConfig, build_backbone
from .disentangle import Decoupler, RegressionHead, preliminary_age
from .gat import GatConfig


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spatial: GatConfig = field(default_factory=GatConfig)
    instance: GatConfig = field(default_factory=GatConfig)
    spatial_graph: str = "cosine"
    use_spatial_agg: bool = True
    use_instance_agg: bool = True
    use_disentangle: bool = True
    head_hidden: int = 32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        d["spatial"] = GatConfig(**d.get("spatial", {}))
        d["instance"] = GatConfig(**d.get("instance", {}))
        return cls(**d)


@dataclass
class ModelOutput:
    y_hat: torch.Tensor  # (B,)
    z_age: torch.Tensor  # (B, C)
    instance_scores: torch.Tensor  # (B, K)
    spatial_maps: torch.Tensor  # (B, K, H', W')
    y0: torch.Tensor | None = None
    z_stru: torch.Tensor | None = None
    e_stru: torch.Tensor | None = None  # (B, K, C, H', W')


class DGADMIL(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), age_prior: float = 63.0):
        super().__init__()
        self.cfg = cfg
        C = cfg.backbone.out_channels
        self.backbone = build_backbone(cfg.backbone)
        self.aggregator = DualAggregator(
            C, cfg.spatial, cfg.instance, cfg.use_spatial_agg, cfg.use_instance_agg, cfg.spatial_graph
        )
        self.head = RegressionHead(C, cfg.head_hidden, age_prior)
        if cfg.use_disentangle:
            self.decoupler = Decoupler(C)
            self.prelim = RegressionHead(C, cfg.head_hidden, age_prior)
        else:
            self.decoupler = None
            self.prelim = None

    def set_age_prior(self, age: float) -> None:
        self.head.set_age_prior(age)
        if self.prelim is not None:
            self.prelim.set_age_prior(age)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        B, K = x.shape[:2]
        e = self.backbone(x.reshape(B * K, *x.shape[2:]))
        return e.view(B, K, *e.shape[1:])

    def forward(self, x: torch.Tensor) -> ModelOutput:
        """x: (B, K, m, H, W) bags."""
        B, K = x.shape[:2]
        e = self.features(x)
        if self.decoupler is None:
            z, s, maps = self.aggregator(e)
            return ModelOutput(self.head(z), z, s, maps)
        flat = e.reshape(B * K, *e.shape[2:])
        e_stru = self.decoupler(flat).view_as(e)
        e_age = e - e_stru
        # one aggregator, two passes: the age pass supplies scores and maps
        both = torch.cat([e_age, e_stru], dim=0)
        z, s, maps = self.aggregator(both)
        z_age, z_stru = z[:B], z[B:]
        return ModelOutput(
            y_hat=self.head(z_age),
            z_age=z_age,
            instance_scores=s[:B],
            spatial_maps=maps[:B],
            y0=preliminary_age(self.prelim, e_age),
            z_stru=z_stru,
            e_stru=e_stru,
        )


def gat_parameter_count(model: nn.Module) -> int:
    from .gat import GATBlock

    return sum(p.numel() for m in model.modules() if isinstance(m, GATBlock) for p in m.parameters())
