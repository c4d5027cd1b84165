"""Attention export, CSV reports and the ablation driver."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import parse_float, parse_ints, read_container, write_container
from .metrics import EvalReport
from .model import DGADMIL, ModelConfig, gat_parameter_count
from .training import BagSet, RunRecord, TrainConfig, evaluate, predict, train

ATTENTION_MAGIC = "DGAATT1"

# name -> (use_spatial_agg, use_instance_agg, use_disentangle)
VARIANTS = {
    "full": (True, True, True),
    "wo_dis": (True, True, False),
    "wo_spatial_dis": (False, True, False),
    "wo_all": (False, False, False),
}


@dataclass
class AttentionRecord:
    subject_id: int
    age: float
    predicted: float
    instance_scores: np.ndarray  # (K,)
    spatial_maps: np.ndarray  # (K, H', W'), each map sums to 1
    signal_instances: list[int]

    def top_instances(self, k: int = 2) -> list[int]:
        return [int(i) for i in np.argsort(-self.instance_scores, kind="stable")[:k]]


def attention_records(model: DGADMIL, data: BagSet) -> list[AttentionRecord]:
    out = predict(model, data.x)
    return [
        AttentionRecord(sid, float(age), float(pred), s.double().numpy(), m.double().numpy(), list(sig))
        for sid, age, pred, s, m, sig in zip(
            data.subject_ids, data.age, out["y_hat"], out["instance_scores"], out["spatial_maps"],
            data.signal_instances,
        )
    ]


def write_attention(rec: AttentionRecord, path: str | os.PathLike) -> None:
    meta = {"subject": rec.subject_id, "age": rec.age, "pred": rec.predicted}
    write_container(path, ATTENTION_MAGIC, rec.spatial_maps.astype(np.float32), meta)


def read_attention(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    maps, fields = read_container(path, ATTENTION_MAGIC)
    (subject,) = parse_ints(fields, "subject")
    return maps, {"subject": subject, "age": parse_float(fields, "age"), "pred": parse_float(fields, "pred")}


def export_attention(model: DGADMIL, data: BagSet, out_dir: str | os.PathLike) -> list[AttentionRecord]:
    """Write one DGAATT1 map file per bag and an ``attention_scores.csv`` summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = attention_records(model, data)
    K = records[0].instance_scores.shape[0] if records else 0
    with open(out / "attention_scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "age", "pred", "top1", "top2", "signal_instances", *[f"s{j}" for j in range(K)]])
        for rec in records:
            write_attention(rec, out / f"att_{rec.subject_id}.dgaatt")
            top = rec.top_instances(2)
            writer.writerow([rec.subject_id, f"{rec.age:.6f}", f"{rec.predicted:.6f}", *top,
                             " ".join(map(str, rec.signal_instances)),
                             *[f"{v:.8f}" for v in rec.instance_scores]])
    return records


def localization_rate(records: list[AttentionRecord], top: int = 2) -> float:
    """Fraction of bags whose ``top`` highest-scored instances all lie in the planted slab."""
    hits = [set(r.top_instances(top)) <= set(r.signal_instances) for r in records if r.signal_instances]
    return sum(hits) / len(hits) if hits else float("nan")


def write_report_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for k, v in report.summary().items():
            writer.writerow([k, repr(v)])


def write_subjects_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subject", "true_age", "pred_age", "error"])
        writer.writeheader()
        writer.writerows(report.subject_rows())


def write_sigma_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["bin_lo", "bin_hi", "n", "sigma_pred", "sigma_err"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


@dataclass
class AblationRun:
    variant: str
    seed: int
    record: RunRecord
    report: EvalReport
    gat_params: int


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    spatial, instance, dis = VARIANTS[variant]
    return dataclasses.replace(base, use_spatial_agg=spatial, use_instance_agg=instance, use_disentangle=dis)


def ablate(
    base_cfg: TrainConfig,
    data: tuple[BagSet, BagSet, BagSet],
    model_cfg: ModelConfig = ModelConfig(),
    variants=tuple(VARIANTS),
    seeds=(0,),
    manifest=None,
) -> list[AblationRun]:
    """Train every variant with identical seeds and data; evaluate on the test split."""
    train_set, val_set, test_set = data
    runs = []
    for seed in seeds:
        cfg = dataclasses.replace(base_cfg, param_seed=seed, data_seed=seed, pairing_seed=seed)
        for variant in variants:
            mcfg = variant_config(model_cfg, variant)
            model, record = train(cfg, manifest, mcfg, data=(train_set, val_set))
            runs.append(AblationRun(variant, seed, record, evaluate(model, test_set), gat_parameter_count(model)))
    return runs


def write_ablation_csv(runs: list[AblationRun], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "epochs", "best_epoch", "test_mae", "test_rmse", "test_pcc", "gat_params"])
        for r in runs:
            writer.writerow([r.variant, r.seed, len(r.record.epochs), r.record.best_epoch,
                             repr(r.report.mae), repr(r.report.rmse), repr(r.report.pcc), r.gat_params])
