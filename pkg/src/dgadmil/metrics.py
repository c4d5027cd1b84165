"""Regression metrics and the per-age-bin spread profile."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    mae: float
    rmse: float
    pcc: float
    slope: float
    intercept: float
    true_age: np.ndarray
    pred_age: np.ndarray
    subject_ids: list[int] = field(default_factory=list)
    sigma: list[dict] = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return self.pred_age - self.true_age

    def summary(self) -> dict[str, float]:
        return {"mae": self.mae, "rmse": self.rmse, "pcc": self.pcc, "slope": self.slope, "intercept": self.intercept}

    def subject_rows(self) -> list[dict]:
        ids = self.subject_ids or list(range(len(self.true_age)))
        return [
            {"subject": s, "true_age": float(t), "pred_age": float(p), "error": float(p - t)}
            for s, t, p in zip(ids, self.true_age, self.pred_age)
        ]


def regression_metrics(pred, true) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError(f"need matching non-empty 1D arrays, got {pred.shape} and {true.shape}")
    err = pred - true
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    dp = pred - pred.mean()
    dt = true - true.mean()
    sp, st = np.sqrt(np.sum(dp ** 2)), np.sqrt(np.sum(dt ** 2))
    pcc = float(np.sum(dp * dt) / (sp * st)) if sp > 0 and st > 0 else math.nan
    pcc = max(-1.0, min(1.0, pcc)) if not math.isnan(pcc) else pcc
    # least-squares line of predicted on chronological age (scatter plot convention)
    slope = float(np.sum(dp * dt) / np.sum(dt ** 2)) if st > 0 else math.nan
    intercept = float(pred.mean() - slope * true.mean()) if st > 0 else math.nan
    return {"mae": mae, "rmse": rmse, "pcc": pcc, "slope": slope, "intercept": intercept}


def sigma_profile(true, pred, bin_width: float = 5.0, origin: float | None = None) -> list[dict]:
    """Sample standard deviation of predictions and of errors per true-age bin.

    Bins are ``[origin + i*w, origin + (i+1)*w)``; ``origin`` defaults to the
    floor of the youngest age. Bins with fewer than two subjects report None.
    """
    true = np.asarray(true, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if true.size == 0:
        return []
    if origin is None:
        origin = math.floor(true.min())
    idx = np.floor((true - origin) / bin_width).astype(int)
    rows = []
    for b in range(idx.min(), idx.max() + 1):
        sel = idx == b
        n = int(sel.sum())
        if n == 0:
            continue
        row = {"bin_lo": origin + b * bin_width, "bin_hi": origin + (b + 1) * bin_width, "n": n}
        if n < 2:
            row["sigma_pred"] = row["sigma_err"] = None
        else:
            row["sigma_pred"] = float(np.std(pred[sel], ddof=1))
            row["sigma_err"] = float(np.std(pred[sel] - true[sel], ddof=1))
        rows.append(row)
    return rows


def make_report(pred, true, subject_ids=None, bin_width: float = 5.0) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    m = regression_metrics(pred, true)
    return EvalReport(
        m["mae"], m["rmse"], m["pcc"], m["slope"], m["intercept"], true, pred,
        list(subject_ids) if subject_ids is not None else [],
        sigma_profile(true, pred, bin_width),
    )
