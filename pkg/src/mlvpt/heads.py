"""Per-class sigmoid heads, asymmetric loss and the dual-head objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from mlvpt.nncore import ShapeError, sigmoid


@dataclass(frozen=True)
class ASLConfig:
    lambda_pos: float = 0.0
    lambda_neg: float = 2.0
    prob_clamp_eps: float = 1e-7

    def __post_init__(self) -> None:
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise ValueError("ASL exponents must be >= 0")


class ClassHeads(nn.Module):
    """K independent linear scorers, class ``k`` reads only ``c[:, k]``."""

    def __init__(self, n_classes: int, dim: int):
        super().__init__()
        r = math.sqrt(6.0 / (dim + 1))
        self.weight = nn.Parameter(torch.empty(n_classes, dim).uniform_(-r, r))
        self.bias = nn.Parameter(torch.zeros(n_classes))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return classify(c, self.weight, self.bias)


def classify(c: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``sigmoid(<W_k, c_k> + b_k)`` for ``c`` of shape ``[B, K, D]``."""
    if c.shape[-2:] != W.shape or b.shape != W.shape[:1]:
        raise ShapeError(f"heads {tuple(W.shape)} do not match representations {tuple(c.shape)}")
    return sigmoid((c * W).sum(dim=-1) + b)


def asl(probs: torch.Tensor, targets: torch.Tensor, cfg: ASLConfig = ASLConfig()) -> torch.Tensor:
    """Asymmetric loss summed over the class axis (last dim)."""
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    eps = cfg.prob_clamp_eps
    f = probs.clamp(eps, 1.0 - eps)
    y = targets.to(f.dtype)
    pos = (1.0 - f) ** cfg.lambda_pos * -torch.log(f)
    neg = f**cfg.lambda_neg * -torch.log(1.0 - f)
    return (y * pos + (1.0 - y) * neg).sum(dim=-1)


def joint_loss(
    probs_co: torch.Tensor,
    probs_dc: torch.Tensor,
    targets: torch.Tensor,
    cfg: ASLConfig = ASLConfig(),
) -> torch.Tensor:
    """Batch mean of ``asl(co) + asl(dc)``."""
    return (asl(probs_co, targets, cfg) + asl(probs_dc, targets, cfg)).mean()


def predict(probs_co: torch.Tensor, probs_dc: torch.Tensor) -> torch.Tensor:
    return 0.5 * (probs_co + probs_dc)
