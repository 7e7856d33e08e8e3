"""Training loop: AdamW, one-cycle schedule, EMA shadows, early stopping on val mAP."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from mlvpt.checkpoint import save_model
from mlvpt.encoder import EncoderConfig, ViTBackbone
from mlvpt.heads import ASLConfig, asl
from mlvpt.metrics import evaluate
from mlvpt.nncore import Linear, sigmoid

log = logging.getLogger(__name__)

MODES = ("ml_vpt", "vanilla_vpt")
HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_mAP", "val_CF1", "val_OF1"]


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 5e-4
    epochs: int = 40
    batch_size: int = 64
    ema_decay: float = 0.9997
    ema_warmup: bool = True
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_lr_ratio: float = 1e-3
    early_stop_patience: int = 5
    seed: int = 0
    mode: str = "ml_vpt"

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PretrainConfig:
    """Supervised warm-up of the backbone before it is frozen (0 epochs keeps random init)."""

    epochs: int = 15
    max_lr: float = 2e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    pool: str = "mean"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pool not in ("cls", "mean"):
            raise ValueError("pool must be 'cls' or 'mean'")


# --- schedule, optimizer, EMA ---------------------------------------------------


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``max_lr/start_div`` to ``max_lr``, then cosine decay
    to ``max_lr * final_lr_ratio`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.max_lr
    start = peak / cfg.start_div
    end = peak * cfg.final_lr_ratio
    warm = int(cfg.warmup_fraction * total_steps)
    if step <= warm:
        return start + (peak - start) * (step / warm if warm else 1.0)
    span = total_steps - 1 - warm
    if span <= 0:
        return peak
    progress = (step - warm) / span
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=0.0, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay, foreach=False
    )


def optimizer_step(opt: torch.optim.Optimizer, lr: float) -> None:
    """One decoupled-weight-decay Adam step at learning rate ``lr``."""
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteError("non-finite gradient")
        group["lr"] = lr
    opt.step()


class EMAState:
    """Shadow copies of the trainable parameters only."""

    def __init__(self, params: dict[str, torch.Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in params.items()}

    @classmethod
    def from_model(cls, model: nn.Module, decay: float) -> "EMAState":
        return cls(trainable_params(model), decay)


def trainable_params(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


@torch.no_grad()
def ema_update(ema: EMAState, params: dict[str, torch.Tensor], decay: Optional[float] = None) -> EMAState:
    d = ema.decay if decay is None else decay
    if params.keys() != ema.shadow.keys():
        raise ValueError("EMA shadow and parameters do not mirror each other")
    for k, p in params.items():
        s = ema.shadow[k]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        s.mul_(d).add_(p.detach(), alpha=1.0 - d)
    return ema


@contextlib.contextmanager
def swapped_in(model: nn.Module, ema: EMAState) -> Iterator[nn.Module]:
    """Temporarily load the EMA shadow; live values are restored bit-exactly."""
    params = trainable_params(model)
    backup = {k: p.detach().clone() for k, p in params.items()}
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(ema.shadow[k])
    try:
        yield model
    finally:
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(backup[k])


# --- inference ------------------------------------------------------------------


@torch.no_grad()
def predict_batches(model: nn.Module, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Concatenate model outputs over ``images``; keys present depend on the model."""
    dtype = next(model.parameters()).dtype
    chunks: dict[str, list[np.ndarray]] = {}
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i : i + batch_size], dtype=dtype)
        out = model(x)
        for key, val in out._asdict().items():
            if val is not None:
                chunks.setdefault(key, []).append(val.numpy())
    return {k: np.concatenate(v) for k, v in chunks.items()}


# --- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mAP: float = -math.inf
    stopped_early: bool = False


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: nn.Module,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    cfg: TrainConfig,
    asl_cfg: ASLConfig = ASLConfig(),
    out_dir: Optional[str | Path] = None,
) -> TrainResult:
    """Fit the trainable parameters of ``model``; the frozen backbone is untouched.

    When ``out_dir`` is given, writes ``history.csv``, ``best.ckpt`` (at the best
    validation mAP, EMA included) and ``last.ckpt``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(train_images, dtype=dtype)
    Y = torch.as_tensor(train_labels, dtype=dtype)
    params = trainable_params(model)
    opt = make_optimizer(list(params.values()), cfg.weight_decay)
    ema = EMAState(params, cfg.ema_decay)
    steps_per_epoch = math.ceil(len(X) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    result = TrainResult()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        loss_sum, seen, lr = 0.0, 0, 0.0
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, cfg.seed, epoch)):
            lr = one_cycle_lr(step, total, cfg)
            opt.zero_grad(set_to_none=True)
            batch_out = model(X[idx])
            loss = model.loss(batch_out, Y[idx], asl_cfg)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            optimizer_step(opt, lr)
            decay = cfg.ema_decay
            if cfg.ema_warmup:
                decay = min(decay, (1.0 + step) / (10.0 + step))
            ema_update(ema, params, decay)
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
            step += 1
        model.eval()
        with swapped_in(model, ema):
            scores = predict_batches(model, val_images)["y"]
        res = evaluate(scores, val_labels)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "val_mAP": res.mAP,
            "val_CF1": res.CF1,
            "val_OF1": res.OF1,
        }
        result.history.append(row)
        log.info("epoch %d lr %.2e loss %.4f val mAP %.4f", epoch, lr, row["train_loss"], res.mAP)
        if res.mAP > result.best_val_mAP:
            result.best_val_mAP, result.best_epoch = res.mAP, epoch
            if out is not None:
                save_model(out / "best.ckpt", model, ema.shadow)
        if out is not None:
            write_history(out / "history.csv", result.history)
        if epoch - result.best_epoch >= cfg.early_stop_patience:
            result.stopped_early = epoch < cfg.epochs - 1
            break
    if out is not None:
        save_model(out / "last.ckpt", model, ema.shadow)
    return result


def pretrain_backbone(
    enc_cfg: EncoderConfig,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: PretrainConfig = PretrainConfig(),
    asl_cfg: ASLConfig = ASLConfig(),
) -> ViTBackbone:
    """Train a fresh backbone with a linear cls head; returns the backbone only."""
    torch.manual_seed(cfg.seed)
    backbone = ViTBackbone(enc_cfg)
    head = Linear(enc_cfg.embed_dim, labels.shape[1])
    if cfg.epochs == 0:
        return backbone
    params = list(backbone.parameters()) + list(head.parameters())
    opt = make_optimizer(params, cfg.weight_decay)
    X = torch.as_tensor(images, dtype=torch.float32)
    Y = torch.as_tensor(labels, dtype=torch.float32)
    sched = TrainConfig(max_lr=cfg.max_lr, epochs=cfg.epochs, batch_size=cfg.batch_size)
    total = cfg.epochs * math.ceil(len(X) / cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad(set_to_none=True)
            cls, _, E = backbone.forward_tokens(X[idx])
            feat = cls if cfg.pool == "cls" else torch.cat([cls[:, None], E], dim=1).mean(dim=1)
            loss = asl(sigmoid(head(feat)), Y[idx], asl_cfg).mean()
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss during backbone pretraining, epoch {epoch}")
            loss.backward()
            optimizer_step(opt, one_cycle_lr(step, total, sched))
            step += 1
        log.info("pretrain epoch %d loss %.4f", epoch, loss.item())
    return backbone


def evaluate_model(model: nn.Module, images: np.ndarray, labels: np.ndarray, threshold: float = 0.5):
    scores = predict_batches(model, images)["y"]
    return evaluate(scores, labels, threshold), scores

