"""Decoupling unit and the disentanglement losses."""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn

log = logging.getLogger(__name__)


class Decoupler(nn.Module):
    """Structural part of a feature map: 1x1 conv, ReLU, 1x1 conv, then a
    per-position linear map over channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 1)
        self.conv2 = nn.Conv2d(channels, channels, 1)
        self.fc = nn.Conv2d(channels, channels, 1)
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        nn.init.normal_(self.fc.weight, std=1.0 / math.sqrt(channels))
        nn.init.zeros_(self.fc.bias)

    def zero_output(self) -> None:
        with torch.no_grad():
            self.fc.weight.zero_()
            self.fc.bias.zero_()

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv2(torch.relu(self.conv1(e))))


def decouple(psi: Decoupler, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split maps (N, C, H, W) into (e_age, e_stru) with e_age = e - e_stru."""
    e_stru = psi(e)
    return e - e_stru, e_stru


class RegressionHead(nn.Module):
    """Small MLP to a scalar age; final layer starts at zero weight and a bias
    equal to the mean training age."""

    def __init__(self, d_in: int, hidden: int = 32, age_prior: float = 63.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        nn.init.normal_(self.net[0].weight, std=math.sqrt(2.0 / d_in))
        nn.init.zeros_(self.net[0].bias)
        self.set_age_prior(age_prior)

    def set_age_prior(self, age: float) -> None:
        with torch.no_grad():
            self.net[-1].weight.zero_()
            self.net[-1].bias.fill_(float(age))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


def preliminary_age(phi: RegressionHead, e_age: torch.Tensor) -> torch.Tensor:
    """(B, K, C, H, W) age maps -> (B,) preliminary ages via GAP, instance mean, MLP."""
    return phi(e_age.mean(dim=(-2, -1)).mean(dim=1))


def safe_cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along ``dim``; 0 (with zero gradient) if either side is a zero vector."""
    na2 = (a * a).sum(dim)
    nb2 = (b * b).sum(dim)
    valid = (na2 > eps * eps) & (nb2 > eps * eps)
    denom = torch.sqrt(na2.clamp_min(eps * eps)) * torch.sqrt(nb2.clamp_min(eps * eps))
    cos = (a * b).sum(dim) / denom
    return torch.where(valid, cos, torch.zeros_like(cos))


def loss_mse0(y0: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((y - y0) ** 2).mean()


def draw_partners(n: int, seed: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """One partner index per batch element, uniform over [0, n)."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    return torch.randint(0, n, (n,), generator=generator)


def loss_decp1(e_stru: torch.Tensor, partners: torch.Tensor | None = None, seed: int | None = None) -> torch.Tensor:
    """Negative mean cosine similarity of structural maps between paired subjects.

    ``e_stru`` has shape (N, K, ...); each instance map is flattened before the
    cosine. Pairs with i == k contribute zero.
    """
    N, K = e_stru.shape[:2]
    if N < 2:
        log.warning("structural consistency loss needs a batch of >= 2 bags; contributing 0")
        return e_stru.sum() * 0.0
    if partners is None:
        partners = draw_partners(N, seed)
    flat = e_stru.reshape(N, K, -1)
    cos = safe_cosine(flat, flat[partners], dim=-1)  # (N, K)
    keep = (partners != torch.arange(N)).to(cos.dtype).unsqueeze(1)
    l = (keep * cos).sum(1) / K
    return -l.mean()


def loss_decp2(
    z_stru: torch.Tensor, z_age: torch.Tensor, partners: torch.Tensor | None = None, squared: bool = False
) -> torch.Tensor:
    """Mean cosine similarity between structural and age bag embeddings.

    Pairs bag i with itself unless ``partners`` gives another pairing.
    """
    other = z_age if partners is None else z_age[partners]
    cos = safe_cosine(z_stru, other, dim=-1)
    return (cos ** 2 if squared else cos).mean()
