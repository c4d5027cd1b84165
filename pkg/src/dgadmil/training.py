"""Training loop, combined objective, evaluation and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bagging import BagConfig, make_bag
from .disentangle import draw_partners, loss_decp1, loss_decp2, loss_mse0
from .metrics import EvalReport, make_report
from .model import DGADMIL, ModelConfig
from .volume_synth import ConfigError, DatasetManifest, manifest_hash

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dgadmil-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_KEYS = ("mse", "mse0", "decp1", "decp2")


class NumericDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3  # desk scale; full_scale() uses 1e-4
    batch_size: int = 8
    lambda2: float = 0.1
    lambda3: float = 0.05
    lambda4: float = 1.0
    lr_decay: float = 0.8
    decay_patience: int = 5
    max_epochs: int = 40
    early_stop_patience: int = 20
    param_seed: int = 0
    data_seed: int = 0
    pairing_seed: int = 0
    decp2_squared: bool = False
    decp2_random_partner: bool = False
    bin_width: float = 5.0

    def __post_init__(self):
        for name in ("lr", "batch_size", "lr_decay", "max_epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("decay_patience", "early_stop_patience"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": 1e-4, "batch_size": 32, "max_epochs": 120, **overrides})


def total_loss(mse, mse0, decp1, decp2, cfg: TrainConfig = TrainConfig()):
    return mse + cfg.lambda2 * mse0 + cfg.lambda3 * decp1 + cfg.lambda4 * decp2


class PlateauController:
    """LR decay and early stopping on a monitored loss.

    An epoch improves only if its loss is a new strict minimum. After
    ``decay_patience`` consecutive non-improving epochs the LR is multiplied by
    ``factor`` and that counter restarts; after ``stop_patience`` consecutive
    non-improving epochs training stops.
    """

    def __init__(self, lr: float, factor: float = 0.8, decay_patience: int = 5, stop_patience: int = 20):
        self.lr = lr
        self.factor = factor
        self.decay_patience = decay_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.since_decay = 0
        self.since_best = 0
        self.should_stop = False

    def step(self, loss: float) -> bool:
        """Record one epoch; returns True if the LR was decayed."""
        if loss < self.best:
            self.best = loss
            self.since_decay = 0
            self.since_best = 0
            return False
        self.since_decay += 1
        self.since_best += 1
        if self.since_best >= self.stop_patience:
            self.should_stop = True
        if self.since_decay >= self.decay_patience:
            self.lr *= self.factor
            self.since_decay = 0
            return True
        return False


@dataclass
class BagSet:
    x: torch.Tensor  # (N, K, m, H, W)
    age: torch.Tensor  # (N,)
    subject_ids: list[int]
    signal_instances: list[list[int]]


def load_bags(manifest: DatasetManifest, split: str, bag_cfg: BagConfig = BagConfig()) -> BagSet:
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"split {split!r} is empty")
    bags = [make_bag(manifest.load(e), bag_cfg) for e in entries]
    x = torch.from_numpy(np.stack([b.instances for b in bags]))
    age = torch.tensor([b.age for b in bags], dtype=torch.float32)
    return BagSet(x, age, [b.subject_id for b in bags], [b.signal_instances() for b in bags])


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    checkpoint: str = ""
    manifest_hash: str = ""
    best_epoch: int = -1
    stopped_early: bool = False

    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_text(self) -> str:
        lines = [f"checkpoint={self.checkpoint}", f"manifest_hash={self.manifest_hash}",
                 f"wall_time={self.wall_time:.3f}", f"best_epoch={self.best_epoch}",
                 f"stopped_early={int(self.stopped_early)}"]
        lines += [f"config.{k}={v}" for k, v in _flatten(self.config).items()]
        for rec in self.epochs:
            lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()))
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def compute_losses(out, y: torch.Tensor, cfg: TrainConfig, partners: torch.Tensor | None) -> dict[str, torch.Tensor]:
    mse = ((out.y_hat - y) ** 2).mean()
    zero = mse * 0.0
    if out.e_stru is None:
        parts = {"mse": mse, "mse0": zero, "decp1": zero, "decp2": zero}
    else:
        parts = {
            "mse": mse,
            "mse0": loss_mse0(out.y0, y),
            "decp1": loss_decp1(out.e_stru, partners) if partners is not None else zero,
            "decp2": loss_decp2(
                out.z_stru, out.z_age, partners if cfg.decp2_random_partner else None, cfg.decp2_squared
            ),
        }
    parts["total"] = total_loss(parts["mse"], parts["mse0"], parts["decp1"], parts["decp2"], cfg)
    return parts


@torch.no_grad()
def predict(model: DGADMIL, x: torch.Tensor, batch_size: int = 16) -> dict[str, torch.Tensor]:
    model.eval()
    keep = {"y_hat": [], "instance_scores": [], "spatial_maps": []}
    for i in range(0, x.shape[0], batch_size):
        out = model(x[i:i + batch_size])
        for k in keep:
            keep[k].append(getattr(out, k))
    return {k: torch.cat(v) for k, v in keep.items()}


def _epoch_eval(model, data: BagSet, cfg: TrainConfig, gen: torch.Generator) -> dict[str, float]:
    model.eval()
    sums = {k: 0.0 for k in (*LOSS_KEYS, "total")}
    preds = []
    with torch.no_grad():
        for i in range(0, len(data.age), cfg.batch_size):
            xb, yb = data.x[i:i + cfg.batch_size], data.age[i:i + cfg.batch_size]
            partners = draw_partners(len(yb), generator=gen) if len(yb) >= 2 else None
            out = model(xb)
            parts = compute_losses(out, yb, cfg, partners)
            for k in sums:
                sums[k] += float(parts[k]) * len(yb)
            preds.append(out.y_hat)
    n = len(data.age)
    res = {k: v / n for k, v in sums.items()}
    res["mae"] = float((torch.cat(preds) - data.age).abs().mean())
    return res


def build_model(model_cfg: ModelConfig, age_prior: float, seed: int) -> DGADMIL:
    torch.manual_seed(seed)
    return DGADMIL(model_cfg, age_prior)


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    model_cfg: ModelConfig = ModelConfig(),
    out_dir: str | os.PathLike | None = None,
    bag_cfg: BagConfig = BagConfig(),
    data: tuple[BagSet, BagSet] | None = None,
    manifest_path: str | os.PathLike | None = None,
) -> tuple[DGADMIL, RunRecord]:
    """Train and return the best-validation model and its run record.

    ``data`` may carry preloaded (train, val) bag sets to skip disk reads.
    """
    t0 = time.perf_counter()
    train_set, val_set = data if data is not None else (load_bags(manifest, "train", bag_cfg),
                                                       load_bags(manifest, "val", bag_cfg))
    if len(train_set.age) == 0 or len(val_set.age) == 0:
        raise ConfigError("train and val splits must be non-empty")
    age_prior = float(train_set.age.double().mean())
    model = build_model(model_cfg, age_prior, cfg.param_seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ctrl = PlateauController(cfg.lr, cfg.lr_decay, cfg.decay_patience, cfg.early_stop_patience)
    order_gen = torch.Generator().manual_seed(cfg.data_seed)
    pair_gen = torch.Generator().manual_seed(cfg.pairing_seed)
    record = RunRecord(config={
        "train": dataclasses.asdict(cfg), "model": model_cfg.to_dict(), "bag": dataclasses.asdict(bag_cfg),
        "age_prior": age_prior,
    })
    if manifest_path is not None:
        record.manifest_hash = manifest_hash(manifest_path)
    ckpt_path = Path(out_dir) / "best.ckpt" if out_dir is not None else None
    if ckpt_path is not None:
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        record.checkpoint = str(ckpt_path)
    best_mae, best_state = math.inf, copy.deepcopy(model.state_dict())
    n = len(train_set.age)

    for epoch in range(cfg.max_epochs):
        model.train()
        perm = torch.randperm(n, generator=order_gen)
        sums = {k: 0.0 for k in (*LOSS_KEYS, "total")}
        seen = 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue  # BatchNorm and the pairing loss need >= 2 bags
            xb, yb = train_set.x[idx], train_set.age[idx]
            partners = draw_partners(len(idx), generator=pair_gen)
            out = model(xb)
            parts = compute_losses(out, yb, cfg, partners)
            if not torch.isfinite(parts["total"]):
                _abort(model, best_state, ckpt_path, record, model_cfg, bag_cfg, age_prior, epoch, t0)
            opt.zero_grad()
            parts["total"].backward()
            opt.step()
            for k in sums:
                sums[k] += float(parts[k].detach()) * len(idx)
            seen += len(idx)
        train_stats = {k: v / max(seen, 1) for k, v in sums.items()}
        val_stats = _epoch_eval(model, val_set, cfg, torch.Generator().manual_seed(cfg.pairing_seed + 1))
        rec = {"epoch": epoch, "lr": opt.param_groups[0]["lr"]}
        rec.update({f"train_{k}": v for k, v in train_stats.items()})
        rec.update({f"val_{k}": v for k, v in val_stats.items()})
        record.epochs.append(rec)
        log.info("epoch %d train %.4f val_mae %.3f lr %.2e", epoch, train_stats["total"], val_stats["mae"], rec["lr"])
        if val_stats["mae"] < best_mae:
            best_mae = val_stats["mae"]
            best_state = copy.deepcopy(model.state_dict())
            record.best_epoch = epoch
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path, model_cfg, bag_cfg, age_prior)
        if ctrl.step(train_stats["total"]):
            for group in opt.param_groups:
                group["lr"] = ctrl.lr
        if ctrl.should_stop:
            record.stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()
    record.wall_time = time.perf_counter() - t0
    return model, record


def _abort(model, best_state, ckpt_path, record, model_cfg, bag_cfg, age_prior, epoch, t0):
    model.load_state_dict(best_state)
    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path, model_cfg, bag_cfg, age_prior)
    record.wall_time = time.perf_counter() - t0
    raise NumericDivergence(f"non-finite loss in epoch {epoch}; last finite best model kept")


def save_checkpoint(model: DGADMIL, path, model_cfg: ModelConfig, bag_cfg: BagConfig, age_prior: float) -> None:
    state = model.state_dict()
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model_cfg.to_dict(),
        "bag_config": dataclasses.asdict(bag_cfg),
        "age_prior": age_prior,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
    }, path)


def load_checkpoint(path) -> tuple[DGADMIL, BagConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    model = DGADMIL(ModelConfig.from_dict(blob["model_config"]), blob["age_prior"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, BagConfig(**blob["bag_config"])


def evaluate(model: DGADMIL, data: BagSet, bin_width: float = 5.0) -> EvalReport:
    pred = predict(model, data.x)["y_hat"].double().numpy()
    return make_report(pred, data.age.double().numpy(), data.subject_ids, bin_width)
