"""Assembled classifiers: grouped-prompt model with MoE dual heads, and plain VPT."""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from mlvpt.encoder import EncoderConfig, GroupPromptEncoder, PromptBank, ViTBackbone
from mlvpt.heads import ASLConfig, ClassHeads, asl, joint_loss, predict
from mlvpt.labelgraph import Partition
from mlvpt.moe import ExpertBank, GateBank, label_aware
from mlvpt.nncore import Linear, freeze, sigmoid


class ModelOutput(NamedTuple):
    y: torch.Tensor
    y_co: Optional[torch.Tensor] = None
    y_dc: Optional[torch.Tensor] = None
    gates_co: Optional[torch.Tensor] = None
    gates_dc: Optional[torch.Tensor] = None


class MLVPT(nn.Module):
    """Frozen backbone + CO/DC group prompts + per-class MoE + dual heads."""

    mode = "ml_vpt"

    def __init__(
        self,
        backbone: ViTBackbone,
        cfg: EncoderConfig,
        partition_co: Partition,
        partition_dc: Partition,
        expert_hidden: int = 5,
    ):
        super().__init__()
        if partition_co.n_groups != cfg.n_groups or partition_dc.n_groups != cfg.n_groups:
            raise ValueError("partitions must have cfg.n_groups groups")
        if partition_co.n_classes != partition_dc.n_classes:
            raise ValueError("CO and DC partitions cover different class counts")
        K, D = partition_co.n_classes, cfg.embed_dim
        self.cfg = cfg
        self.n_classes = K
        self.expert_hidden = expert_hidden
        self.partition_co = partition_co
        self.partition_dc = partition_dc
        self.encoder = GroupPromptEncoder(freeze(backbone), cfg)
        self.experts_co = ExpertBank(cfg.n_groups, cfg.n_slots, D, expert_hidden)
        self.experts_dc = ExpertBank(cfg.n_groups, cfg.n_slots, D, expert_hidden)
        self.gates_co = GateBank(K, cfg.n_slots, D)
        self.gates_dc = GateBank(K, cfg.n_slots, D)
        self.heads_co = ClassHeads(K, D)
        self.heads_dc = ClassHeads(K, D)

    @property
    def backbone(self) -> ViTBackbone:
        return self.encoder.backbone

    @property
    def prompt_bank(self):
        return self.encoder.prompt_bank

    def sections(self) -> dict[str, nn.Module]:
        return {
            "backbone": self.backbone,
            "prompt_bank": self.prompt_bank,
            "experts_co": self.experts_co,
            "experts_dc": self.experts_dc,
            "gates_co": self.gates_co,
            "gates_dc": self.gates_dc,
            "heads_co": self.heads_co,
            "heads_dc": self.heads_dc,
        }

    def forward(self, images: torch.Tensor) -> ModelOutput:
        reps = self.encoder(images)
        c_co, w_co = label_aware(self.partition_co, reps.z_co, self.experts_co, self.gates_co, True)
        c_dc, w_dc = label_aware(self.partition_dc, reps.z_dc, self.experts_dc, self.gates_dc, True)
        y_co, y_dc = self.heads_co(c_co), self.heads_dc(c_dc)
        return ModelOutput(predict(y_co, y_dc), y_co, y_dc, w_co, w_dc)

    def loss(self, out: ModelOutput, targets: torch.Tensor, cfg: ASLConfig) -> torch.Tensor:
        return joint_loss(out.y_co, out.y_dc, targets, cfg)


class VanillaVPT(nn.Module):
    """Deep ungrouped prompts, no mask, one linear head on the cls output."""

    mode = "vanilla_vpt"

    def __init__(self, backbone: ViTBackbone, cfg: EncoderConfig, n_classes: int, n_prompts: Optional[int] = None):
        super().__init__()
        D = cfg.embed_dim
        self.cfg = cfg
        self.n_classes = n_classes
        self.n_prompts = cfg.n_prompts if n_prompts is None else n_prompts
        self.backbone = freeze(backbone)
        self.prompt_bank = PromptBank(cfg.n_layers, self.n_prompts, D, cfg.prompt_init_scale)
        self.head = Linear(D, n_classes)

    def sections(self) -> dict[str, nn.Module]:
        return {"backbone": self.backbone, "prompt_bank": self.prompt_bank, "head": self.head}

    def forward(self, images: torch.Tensor) -> ModelOutput:
        cls, _, _ = self.backbone.forward_tokens(images, self.prompt_bank.flat())
        return ModelOutput(sigmoid(self.head(cls)))

    def loss(self, out: ModelOutput, targets: torch.Tensor, cfg: ASLConfig) -> torch.Tensor:
        return asl(out.y, targets, cfg).mean()


def named_section_params(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Parameters as ``section.name`` pairs in a fixed order."""
    out = []
    for sec, mod in model.sections().items():
        for name, p in mod.named_parameters():
            out.append((f"{sec}.{name}", p))
    return out


def build_classifier(
    mode: str,
    backbone: ViTBackbone,
    cfg: EncoderConfig,
    n_classes: int,
    partitions: Optional[tuple[Partition, Partition]] = None,
    expert_hidden: int = 5,
    seed: int = 0,
) -> nn.Module:
    """Seeded construction of either model around an existing backbone."""
    torch.manual_seed(seed)
    if mode == "ml_vpt":
        if partitions is None:
            raise ValueError("ml_vpt needs CO and DC partitions")
        co, dc = partitions
        if co.n_classes != n_classes:
            raise ValueError(f"grouping covers {co.n_classes} classes, data has {n_classes}")
        return MLVPT(backbone, cfg, co, dc, expert_hidden)
    if mode == "vanilla_vpt":
        return VanillaVPT(backbone, cfg, n_classes)
    raise ValueError(f"unknown mode {mode!r}")
