"""VGG-style per-instance feature extractor."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .volume_synth import ConfigError

FULL_CHANNELS = (64, 128, 256, 512)
DESK_CHANNELS = (8, 16, 32, 64)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = DESK_CHANNELS
    blocks_per_stage: int = 2
    pool: int = 2
    in_channels: int = 3
    post_blocks: int = 2
    init: str = "kaiming"
    input_size: tuple[int, int] = (48, 48)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError(f"channel plan must be non-empty and positive, got {self.channels}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.init not in ("kaiming", "default"):
            raise ConfigError(f"unknown init scheme {self.init!r}")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def out_size(self) -> tuple[int, int]:
        f = self.pool ** len(self.channels)
        return self.input_size[0] // f, self.input_size[1] // f


def conv_block(cin: int, cout: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2),
        nn.BatchNorm2d(cout, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Stages of (3x3 conv, BN, ReLU) x blocks_per_stage followed by max-pooling,
    then ``post_blocks`` 1x1 conv blocks mixing channels."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = cfg.in_channels
        for cout in cfg.channels:
            blocks = []
            for _ in range(cfg.blocks_per_stage):
                blocks.append(conv_block(cin, cout, 3))
                cin = cout
            blocks.append(nn.MaxPool2d(cfg.pool, cfg.pool))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.post = nn.Sequential(*[conv_block(cin, cin, 1) for _ in range(cfg.post_blocks)])
        if cfg.init == "kaiming":
            for mod in self.modules():
                if isinstance(mod, nn.Conv2d):
                    nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu")
                    nn.init.zeros_(mod.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.in_channels, *self.cfg.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"backbone expects instances of shape {expected}, got {tuple(x.shape[1:])}")
        return self.post(self.stages(x))

    def load_stage_weights(self, state: dict[str, torch.Tensor], strict: bool = False):
        """Hook for externally supplied (e.g. pretrained) weights.

        Keys follow this module's ``state_dict`` naming; shapes must match.
        """
        own = self.state_dict()
        for key, value in state.items():
            if key in own and own[key].shape != value.shape:
                raise ShapeError(f"{key}: expected {tuple(own[key].shape)}, got {tuple(value.shape)}")
        return self.load_state_dict(state, strict=strict)


def build_backbone(cfg: BackboneConfig) -> Backbone:
    f = cfg.pool ** len(cfg.channels)
    h, w = cfg.input_size
    if h % f or w % f:
        raise ConfigError(f"input size {cfg.input_size} not divisible by {f} (= {cfg.pool}^{len(cfg.channels)})")
    return Backbone(cfg)


def backbone_forward(backbone: Backbone, instances: torch.Tensor) -> torch.Tensor:
    """(K, m, H, W) instances of one bag -> (K, C, H', W') feature maps, order kept."""
    if instances.dim() != 4:
        raise ShapeError(f"expected (K, m, H, W) instances, got shape {tuple(instances.shape)}")
    return backbone(instances)
