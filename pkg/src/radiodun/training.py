"""Training, evaluation, transfer and classical-baseline runs.

Run outputs live under ``out_dir/{checkpoints,reports,plots,logs}``.
"""

from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .ao import AOConfig, ao_solve
from .config import BaselineConfig, DatasetSpec, OptimizerConfig, RunConfig
from .data import DatasetError, RadioMapDataset, build_splits, take_fraction
from .net.model import ModelConfig, RadioDUN
from .objectives import EvalReport, ssim_global, total_loss
from .plots import save_panels

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "radiodun-checkpoint/1"
LOG_COLUMNS = ["epoch", "step", "lr", "train_loss", "train_rmse", "val_rmse", "seconds"]
SUBDIRS = ("checkpoints", "reports", "plots", "logs")


def make_dirs(out_dir) -> dict[str, Path]:
    root = Path(out_dir)
    dirs = {name: root / name for name in SUBDIRS}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


# ------------------------------------------------------------ checkpoints

def _rng_state(shuffle: torch.Generator | None) -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
        "shuffle": shuffle.get_state() if shuffle is not None else None,
    }


def _restore_rng(state: dict, shuffle: torch.Generator | None):
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])
    if shuffle is not None and state.get("shuffle") is not None:
        shuffle.set_state(state["shuffle"])


def save_checkpoint(path, model: RadioDUN, *, optimizer=None, scheduler=None, epoch: int = 0, step: int = 0,
                    run_config: RunConfig | None = None, dataset_spec: DatasetSpec | None = None,
                    shuffle: torch.Generator | None = None, best_val: float | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.model_dump_json(),
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "step": step,
        "rng": _rng_state(shuffle),
        "run_config": run_config.model_dump_json() if run_config is not None else None,
        "dataset_spec": dataset_spec.model_dump_json() if dataset_spec is not None else None,
        "best_val": best_val,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return payload


def model_from_checkpoint(payload: dict) -> RadioDUN:
    model = RadioDUN(ModelConfig.model_validate_json(payload["model_config"]))
    model.load_state_dict(payload["weights"])
    return model


# ---------------------------------------------------------------- metrics

class MetricAccumulator:
    """Streams RMSE / PSNR (pooled over all cells) and mean per-map global SSIM."""

    def __init__(self, peak: float = 1.0):
        self.sse = 0.0
        self.count = 0
        self.ssims: list[float] = []
        self.peak = peak

    def update(self, gt, pred):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, *np.shape(gt)[-2:])
        pred = np.asarray(pred, dtype=np.float64).reshape(gt.shape)
        self.sse += float(np.sum((gt - pred) ** 2))
        self.count += gt.size
        self.ssims.extend(ssim_global(a, b) for a, b in zip(gt, pred))

    @property
    def mse(self) -> float:
        return self.sse / self.count

    @property
    def rmse(self) -> float:
        return math.sqrt(self.mse)

    def report(self, **meta) -> EvalReport:
        if not self.count:
            raise DatasetError(["evaluation split is empty"])
        psnr = math.inf if self.sse == 0 else 10.0 * math.log10(self.peak ** 2 / self.mse)
        return EvalReport(rmse=self.rmse, ssim=float(np.mean(self.ssims)), psnr=psnr,
                          n_maps=len(self.ssims), **meta)


def _batches(dataset, batch_size, shuffle=None):
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle is not None, generator=shuffle,
                      num_workers=0)


@torch.no_grad()
def predict(model: RadioDUN, dataset: RadioMapDataset, batch_size: int = 8):
    """Yield ``(target, prediction, batch)`` numpy pairs in evaluation mode."""
    model.eval()
    for batch in _batches(dataset, batch_size):
        out = model(batch["y_map"], batch["mask"], batch["env"])
        yield batch["target"][:, 0].numpy(), out.x_hat[:, 0].numpy(), batch


def dataset_rmse(model: RadioDUN, dataset: RadioMapDataset, batch_size: int = 8) -> float:
    acc = MetricAccumulator()
    for gt, pred, _ in predict(model, dataset, batch_size):
        acc.update(gt, pred)
    return acc.rmse


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    best: Path
    last: Path
    log: Path
    history: list[dict]
    model: RadioDUN


def _scheduler(optimizer, cfg: OptimizerConfig, total_steps: int):
    if cfg.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda _: 1.0)


def _fit_model_config(run: RunConfig, dataset: RadioMapDataset) -> ModelConfig:
    sample = dataset[0]
    h, w = sample["target"].shape[-2:]
    m = sample["env"].shape[0] - 1
    return ModelConfig.model_validate({**run.model.model_dump(), "H": int(h), "W": int(w), "m": int(m)})


def train(run: RunConfig, spec: DatasetSpec, out_dir, *, splits: dict | None = None,
          init_weights: dict | None = None, resume=None, stop_after: int | None = None,
          tag: str = "") -> TrainResult:
    """Minimize the total loss on the train split.

    ``init_weights`` warm-starts the model (transfer); ``resume`` continues
    an interrupted run from its last checkpoint; ``stop_after`` ends the run
    after that many epochs in total (used to simulate interruption).
    """
    dirs = make_dirs(out_dir)
    splits = splits if splits is not None else build_splits(spec)
    train_set, val_set = splits["train"], splits.get("val")
    if len(train_set) == 0:
        raise DatasetError(["train split is empty"])
    torch.manual_seed(run.seed)
    np.random.seed(run.seed % 2**32)
    random.seed(run.seed)
    model_cfg = _fit_model_config(run, train_set)
    model = RadioDUN(model_cfg)
    if init_weights is not None:
        model.load_state_dict(init_weights)
    optimizer = torch.optim.AdamW(model.parameters(), lr=run.optimizer.lr, weight_decay=run.optimizer.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / run.batch_size)
    total_steps = run.epochs * steps_per_epoch
    if run.max_steps is not None:
        total_steps = min(total_steps, run.max_steps)
    scheduler = _scheduler(optimizer, run.optimizer, total_steps)
    shuffle = torch.Generator().manual_seed(run.seed)

    prefix = f"{tag}_" if tag else ""
    best_path = dirs["checkpoints"] / f"{prefix}best.pt"
    last_path = dirs["checkpoints"] / f"{prefix}last.pt"
    log_path = dirs["logs"] / f"{prefix}train_log.csv"
    start_epoch, step, best_val = 0, 0, math.inf
    history: list[dict] = []
    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["weights"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        _restore_rng(payload["rng"], shuffle)
        start_epoch, step = payload["epoch"], payload["step"]
        best_val = payload["best_val"] if payload["best_val"] is not None else math.inf
        if log_path.exists():
            with log_path.open() as fh:
                history = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= start_epoch]
    _write_log(log_path, history)

    end_epoch = run.epochs if stop_after is None else min(run.epochs, stop_after)
    for epoch in range(start_epoch + 1, end_epoch + 1):
        if step >= total_steps:
            break
        t0 = time.time()
        model.train()
        losses = []
        for batch in _batches(train_set, run.batch_size, shuffle):
            out = model(batch["y_map"], batch["mask"], batch["env"])
            loss = total_loss(batch["target"], out.x_hat, out.x_sigma, run.mu, run.use_shadow_loss)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            step += 1
            losses.append(loss.item())
            if step >= total_steps:
                break
        train_rmse = dataset_rmse(model, train_set, run.batch_size) if run.eval_train_each_epoch else math.nan
        val_rmse = dataset_rmse(model, val_set, run.batch_size) if val_set is not None and len(val_set) else math.nan
        row = {"epoch": epoch, "step": step, "lr": optimizer.param_groups[0]["lr"],
               "train_loss": float(np.mean(losses)), "train_rmse": train_rmse, "val_rmse": val_rmse,
               "seconds": round(time.time() - t0, 3)}
        history.append(row)
        _append_log(log_path, row)
        score = val_rmse if not math.isnan(val_rmse) else train_rmse
        if math.isnan(score):
            score = row["train_loss"]
        ckpt_args = dict(optimizer=optimizer, scheduler=scheduler, epoch=epoch, step=step, run_config=run,
                         dataset_spec=spec, shuffle=shuffle)
        if score < best_val:
            best_val = score
            save_checkpoint(best_path, model, best_val=best_val, **ckpt_args)
        save_checkpoint(last_path, model, best_val=best_val, **ckpt_args)
        log.info("epoch %d step %d loss %.5f train_rmse %.5f val_rmse %.5f", epoch, step, row["train_loss"],
                 train_rmse, val_rmse)
    if not best_path.exists():
        save_checkpoint(best_path, model, epoch=start_epoch, step=step, run_config=run, dataset_spec=spec)
    if not last_path.exists():
        save_checkpoint(last_path, model, epoch=start_epoch, step=step, run_config=run, dataset_spec=spec)
    return TrainResult(best_path, last_path, log_path, history, model)


def _write_log(path: Path, rows: list[dict]):
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _append_log(path: Path, row: dict):
    with path.open("a", newline="") as fh:
        csv.DictWriter(fh, fieldnames=LOG_COLUMNS).writerow(row)


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# -------------------------------------------------------------- evaluation

def _report_meta(spec: DatasetSpec, split: str, method: str, checkpoint_id=None, seed=None) -> dict:
    return dict(method=method, dataset=spec.dataset_id, tx_known=spec.tx_known, n_samples=spec.samples_per_map,
                split=split, checkpoint_id=checkpoint_id, seed=seed if seed is not None else spec.seed)


def evaluate_model(model: RadioDUN, dataset: RadioMapDataset, spec: DatasetSpec, split: str = "test",
                   method: str = "RadioDUN", checkpoint_id=None, panels: int = 0, plots_dir=None,
                   batch_size: int = 8) -> EvalReport:
    acc = MetricAccumulator()
    for gt, pred, batch in predict(model, dataset, batch_size):
        acc.update(gt, pred)
        for j, idx in enumerate(batch["index"].tolist()):
            if idx < panels:
                save_panels(pred[j], gt[j], Path(plots_dir) / f"{method}_{split}_{idx:03d}.png")
    return acc.report(**_report_meta(spec, split, method, checkpoint_id))


def evaluate(checkpoint, spec: DatasetSpec, split: str = "test", out_dir=None, panels: int = 0,
             splits: dict | None = None, batch_size: int = 8) -> EvalReport:
    """Evaluate a checkpoint on one split; writes JSON/CSV reports when ``out_dir`` is given."""
    payload = load_checkpoint(checkpoint)
    model = model_from_checkpoint(payload)
    splits = splits if splits is not None else build_splits(spec)
    dirs = make_dirs(out_dir) if out_dir is not None else None
    report = evaluate_model(model, splits[split], spec, split, checkpoint_id=Path(checkpoint).name,
                            panels=panels if dirs else 0, plots_dir=dirs["plots"] if dirs else None,
                            batch_size=batch_size)
    if dirs is not None:
        report.write(dirs["reports"], f"eval_{split}_{Path(checkpoint).stem}")
    return report


def transfer(source_checkpoint, target_spec: DatasetSpec, fraction: float, epochs: int = 20,
             run: RunConfig | None = None, out_dir=None, splits: dict | None = None,
             tag: str = "transfer") -> tuple[Path, EvalReport]:
    """Fine-tune a pre-trained checkpoint on a fraction of the target train split.

    ``fraction == 0`` is the zero-shot case: weights are copied unchanged.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    payload = load_checkpoint(source_checkpoint)
    source = model_from_checkpoint(payload)
    splits = splits if splits is not None else build_splits(target_spec)
    out_dir = Path(out_dir) if out_dir is not None else Path(source_checkpoint).parent.parent
    dirs = make_dirs(out_dir)
    if fraction == 0:
        ckpt = save_checkpoint(dirs["checkpoints"] / f"{tag}_zero_shot.pt", source, dataset_spec=target_spec)
        model = source
    else:
        subset = take_fraction(splits["train"].records, fraction)
        if not subset:
            raise DatasetError(["transfer subset is empty"])
        base = run if run is not None else RunConfig.model_validate_json(payload["run_config"])
        base = base.model_copy(update={"epochs": epochs, "model": source.cfg, "max_steps": None})
        tuned_splits = {"train": RadioMapDataset(subset, target_spec), "val": splits.get("val")}
        result = train(base, target_spec, out_dir, splits=tuned_splits, init_weights=payload["weights"],
                       tag=f"{tag}_{int(round(fraction * 100))}pct")
        ckpt = result.last
        model = result.model
    report = evaluate_model(model, splits["test"], target_spec, "test", method="RadioDUN-transfer",
                            checkpoint_id=ckpt.name)
    report.write(dirs["reports"], f"{ckpt.stem}_test")
    return ckpt, report


def run_baseline(spec: DatasetSpec, cfg: BaselineConfig, split: str = "test", out_dir=None,
                 splits: dict | None = None) -> EvalReport:
    """Classical alternating optimization on every map of a split."""
    splits = splits if splits is not None else build_splits(spec)
    dataset = splits[split]
    ao_cfg = AOConfig(beta=list(cfg.beta), epsilon=cfg.epsilon, max_iters=cfg.max_iters, tol=cfg.tol,
                      prior=cfg.prior, tv_weight=cfg.tv_weight)
    acc = MetricAccumulator()
    for i in range(len(dataset)):
        a = dataset.arrays(i)
        result = ao_solve(list(a["env"]), a["observation"], a["plan"], ao_cfg)
        acc.update(a["target"], result.radio_map.values[None])
    report = acc.report(**_report_meta(spec, split, "AO-baseline"))
    if out_dir is not None:
        report.write(make_dirs(out_dir)["reports"], f"baseline_{split}")
    return report


def train_mse(model: RadioDUN, dataset: RadioMapDataset, batch_size: int = 8) -> float:
    acc = MetricAccumulator()
    for gt, pred, _ in predict(model, dataset, batch_size):
        acc.update(gt, pred)
    return acc.mse

