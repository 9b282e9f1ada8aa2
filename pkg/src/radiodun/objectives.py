"""Training objectives, the log-distance physics fit and evaluation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict

from .scene import tx_distance

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ShadowFactor(nn.Module):
    """1x1 convolution over the obstacle factors ``s_1 .. s_m`` (the distance factor is excluded)."""

    def __init__(self, m: int):
        super().__init__()
        if m < 1:
            raise ValueError("shadow factor needs at least one obstacle factor")
        self.m = m
        self.conv = nn.Conv2d(m, 1, 1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[1] != self.m + 1:
            raise ValueError(f"expected {self.m + 1} factors, got {stack.shape[1]}")
        return self.conv(stack[:, 1:])


def _check_same(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def shadowing_loss(x_sigma: torch.Tensor, x_gt: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Variance of the predicted shadowing plus the misfit of the centered shadowing
    against the reconstruction residual.

    Inputs are ``(..., H, W)``; the spatial mean of ``x_sigma`` is taken per map
    and both terms are averaged uniformly over all maps and cells.
    """
    _check_same(x_sigma, x_gt, x_hat)
    centered = x_sigma - x_sigma.mean(dim=(-2, -1), keepdim=True)
    return (centered ** 2).mean() + ((x_gt - x_hat + centered) ** 2).mean()


def mse_loss(x_gt: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same(x_gt, x_hat)
    return ((x_gt - x_hat) ** 2).mean()


def total_loss(x_gt, x_hat, x_sigma, mu: float = 1.0, use_shadow: bool = True) -> torch.Tensor:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    mse = mse_loss(x_gt, x_hat)
    if not use_shadow:
        return mu * mse
    return shadowing_loss(x_sigma, x_gt, x_hat) + mu * mse


@dataclass
class PhysFit:
    alpha: float
    eta: float
    sigma_delta: float


def fit_phys(x, tx_pos, strength: float) -> PhysFit:
    """Least-squares fit of the log-distance model to a raw (unnormalized) map.

    Uses the simulator's sign convention: the loss ``I - X`` is regressed on
    ``10*log10(d)`` (``d`` clamped to 1), so the fit inverts ``synth_raw``.
    """
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if getattr(x, "normalized", False):
        values = x.denormalized()
    loss = strength - values
    f = 10.0 * np.log10(np.maximum(tx_distance(tx_pos, *values.shape), 1.0))
    e, f = loss.reshape(-1), f.reshape(-1)
    if np.ptp(f) == 0:
        raise ValueError("degenerate regression: all distances equal")
    design = np.stack([f, np.ones_like(f)], axis=1)
    (alpha, eta), *_ = np.linalg.lstsq(design, e, rcond=None)
    resid = e - alpha * f - eta
    return PhysFit(float(alpha), float(eta), float(np.sqrt(np.mean(resid ** 2))))


def _pair(x_gt, x_hat):
    a = np.asarray(x_gt, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(x_gt, x_hat) -> float:
    a, b = _pair(x_gt, x_hat)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim_global(x_gt, x_hat, data_range: float = 1.0) -> float:
    """Single-window SSIM using whole-map statistics."""
    a, b = _pair(x_gt, x_hat)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    return float((2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))


def ssim(x_gt, x_hat, data_range: float = 1.0) -> float:
    """Global SSIM; for stacks of maps ``(n, H, W)`` the per-map values are averaged."""
    a, b = _pair(x_gt, x_hat)
    if a.ndim <= 2:
        return ssim_global(a, b, data_range)
    a = a.reshape(-1, *a.shape[-2:])
    b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([ssim_global(p, q, data_range) for p, q in zip(a, b)]))


def psnr(x_gt, x_hat, peak: float = 1.0) -> float:
    a, b = _pair(x_gt, x_hat)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def dec(rmse_all: float, rmse_reduced: float) -> float:
    """Relative RMSE change (in percent) caused by reduced training data, as a magnitude."""
    if rmse_all <= 0:
        raise ValueError("rmse_all must be positive")
    return abs(rmse_all - rmse_reduced) / rmse_all * 100.0


CSV_COLUMNS = ["method", "dataset", "tx_known", "n_samples", "rmse", "ssim", "psnr"]


class EvalReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    method: str
    dataset: str
    tx_known: bool
    n_samples: int
    rmse: float
    ssim: float
    psnr: float
    dec_percent: float | None = None
    split: str = "test"
    n_maps: int = 0
    checkpoint_id: str | None = None
    seed: int | None = None

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}

    def write(self, reports_dir, stem: str) -> tuple[Path, Path]:
        """Write ``<stem>.json`` and append a row to ``reports.csv`` (header only when new)."""
        out = Path(reports_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / f"{stem}.json"
        json_path.write_text(self.model_dump_json(indent=2))
        csv_path = out / "reports.csv"
        new = not csv_path.exists() or csv_path.stat().st_size == 0
        with csv_path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            if new:
                writer.writeheader()
            writer.writerow(self.csv_row())
        return json_path, csv_path

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def summarize(x_gt, x_hat, **meta) -> EvalReport:
    """Aggregate RMSE / SSIM / PSNR over a stack of maps into a report."""
    a, b = _pair(x_gt, x_hat)
    return EvalReport(rmse=rmse(a, b), ssim=ssim(a, b), psnr=psnr(a, b),
                      n_maps=int(a.reshape(-1, *a.shape[-2:]).shape[0]), **meta)
