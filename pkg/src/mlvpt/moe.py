"""Group-aware mixture of experts mapping slot outputs to per-class vectors."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from mlvpt.labelgraph import Partition
from mlvpt.nncore import ShapeError, relu, softmax


def expert_forward(
    z: torch.Tensor,
    w_dn: torch.Tensor,
    b_dn: torch.Tensor,
    w_up: torch.Tensor,
    b_up: torch.Tensor,
) -> torch.Tensor:
    """Residual bottleneck: ``z + relu(z @ w_dn + b_dn) @ w_up + b_up``."""
    if w_dn.shape[0] != z.shape[-1] or w_up.shape != (w_dn.shape[1], z.shape[-1]):
        raise ShapeError("expert weights do not match representation dim")
    return z + relu(z @ w_dn + b_dn) @ w_up + b_up


def gate_weights(w_k: torch.Tensor, b_k: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Softmax over slots of ``<slot_e, w_k> + b_k[e]``; ``slots`` is ``[..., N_m, D]``."""
    if w_k.shape != slots.shape[-1:] or b_k.shape != slots.shape[-2:-1]:
        raise ShapeError("gate parameters do not match slot geometry")
    return softmax(slots @ w_k + b_k, dim=-1)


class ExpertBank(nn.Module):
    """One expert per (group, slot); parameters stacked along the leading axes."""

    def __init__(self, n_groups: int, n_slots: int, dim: int, hidden: int = 5, init_scale: float = 0.01):
        super().__init__()
        if hidden < 1:
            raise ValueError("expert hidden dim must be >= 1")
        r = init_scale * math.sqrt(6.0 / (dim + hidden))
        self.w_dn = nn.Parameter(torch.empty(n_groups, n_slots, dim, hidden).uniform_(-r, r))
        self.b_dn = nn.Parameter(torch.zeros(n_groups, n_slots, hidden))
        self.w_up = nn.Parameter(torch.empty(n_groups, n_slots, hidden, dim).uniform_(-r, r))
        self.b_up = nn.Parameter(torch.zeros(n_groups, n_slots, dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """``z``: ``[B, N_c, N_m, D]`` -> expert outputs of the same shape."""
        if z.shape[-3:] != self.b_up.shape:
            raise ShapeError(f"slot tensor {tuple(z.shape)} does not match expert bank {tuple(self.b_up.shape)}")
        h = relu(torch.einsum("bgmd,gmdh->bgmh", z, self.w_dn) + self.b_dn)
        return z + torch.einsum("bgmh,gmhd->bgmd", h, self.w_up) + self.b_up


class GateBank(nn.Module):
    """Per-class scoring vector and per-slot bias, applied within the class's group."""

    def __init__(self, n_classes: int, n_slots: int, dim: int):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(n_classes, dim))
        self.b = nn.Parameter(torch.zeros(n_classes, n_slots))

    def forward(self, z_by_class: torch.Tensor) -> torch.Tensor:
        """``z_by_class``: ``[B, K, N_m, D]`` -> weights ``[B, K, N_m]``."""
        return softmax(torch.einsum("bkmd,kd->bkm", z_by_class, self.w) + self.b, dim=-1)


def label_aware(
    partition: Partition,
    z: torch.Tensor,
    experts: ExpertBank,
    gates: GateBank,
    return_weights: bool = False,
):
    """Per-class representations ``c_k = sum_e w_k^e E_t^e(z_t^e)`` with ``t = group_of(k)``.

    Returns ``[B, K, D]`` (and the ``[B, K, N_m]`` gate weights if requested).
    """
    if z.dim() != 4 or z.shape[1] != partition.n_groups:
        raise ShapeError(f"z must be [B, {partition.n_groups}, N_m, D], got {tuple(z.shape)}")
    if gates.w.shape[0] != partition.n_classes:
        raise ShapeError("gate bank size differs from the number of classes")
    idx = torch.as_tensor(partition.group_of, dtype=torch.long, device=z.device)
    w = gates(z[:, idx])
    c = torch.einsum("bkm,bkmd->bkd", w, experts(z)[:, idx])
    return (c, w) if return_weights else c
