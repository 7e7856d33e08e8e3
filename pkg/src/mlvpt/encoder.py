"""Frozen ViT backbone with deep, group-aware prompt tokens.

Token layout per block: ``[cls | CO prompts | DC prompts | patches]`` where
each prompt set is ordered group-major, slot-minor. Prompt outputs of every
block except the last are discarded and replaced by the next layer's
learnable tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from mlvpt.nncore import Block, LayerNorm, PatchEmbed, ShapeError, mask_to_bias


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    embed_dim: int = 32
    n_heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    channels: int = 1
    n_groups: int = 5
    n_slots: int = 3
    mlp_ratio: int = 4
    prompt_init_scale: float = 1.0
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide embed_dim={self.embed_dim}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if min(self.n_layers, self.n_groups, self.n_slots) < 1:
            raise ValueError("n_layers, n_groups and n_slots must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_prompts(self) -> int:
        return 2 * self.n_groups * self.n_slots

    @property
    def seq_len(self) -> int:
        return 1 + self.n_prompts + self.n_patches


class ViTBackbone(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.channels, D)
        self.cls_token = nn.Parameter(torch.randn(D) * 0.02)
        self.blocks = nn.ModuleList(Block(D, cfg.n_heads, cfg.mlp_ratio, cfg.ln_eps) for _ in range(cfg.n_layers))
        self.norm = LayerNorm(D, cfg.ln_eps)

    def check_images(self, images: torch.Tensor) -> None:
        c = self.cfg
        if images.shape[-3:] != (c.channels, c.image_size, c.image_size):
            raise ShapeError(
                f"expected images [..., {c.channels}, {c.image_size}, {c.image_size}], got {tuple(images.shape)}"
            )

    def forward_tokens(
        self,
        images: torch.Tensor,
        prompts: Optional[torch.Tensor] = None,
        mask_bias: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ):
        """Run all blocks; returns ``(cls, prompt_out, patches[, attn])``.

        ``prompts`` has shape ``[L, P, D]``: block ``i`` receives ``prompts[i]``
        in the prompt positions regardless of what block ``i-1`` produced there.
        Outputs pass through the final layer norm.
        """
        self.check_images(images)
        B = images.shape[0]
        E = self.patch_embed(images)
        cls = self.cls_token.expand(B, 1, -1)
        P = 0 if prompts is None else prompts.shape[1]
        if prompts is not None and prompts.shape[0] != len(self.blocks):
            raise ShapeError(f"need prompts for {len(self.blocks)} layers, got {prompts.shape[0]}")
        attn_maps = []
        for i, block in enumerate(self.blocks):
            parts = [cls]
            if P:
                parts.append(prompts[i].expand(B, -1, -1))
            parts.append(E)
            x = torch.cat(parts, dim=1)
            if return_attention:
                x, w = block(x, mask_bias, return_weights=True)
                attn_maps.append(w)
            else:
                x = block(x, mask_bias)
            cls, prompt_out, E = x[:, :1], x[:, 1 : 1 + P], x[:, 1 + P :]
        cls, prompt_out, E = self.norm(cls[:, 0]), self.norm(prompt_out), self.norm(E)
        if return_attention:
            return cls, prompt_out, E, attn_maps
        return cls, prompt_out, E


class GroupPromptBank(nn.Module):
    """Learnable tokens indexed ``[layer, mode(CO=0, DC=1), group, slot, D]``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        shape = (cfg.n_layers, 2, cfg.n_groups, cfg.n_slots, cfg.embed_dim)
        r = cfg.prompt_init_scale * math.sqrt(6.0 / cfg.embed_dim)
        self.tokens = nn.Parameter(torch.empty(shape).uniform_(-r, r))

    def flat(self) -> torch.Tensor:
        L, _, _, _, D = self.tokens.shape
        return self.tokens.reshape(L, -1, D)


class PromptBank(nn.Module):
    """Ungrouped deep prompts ``[layer, n_prompts, D]`` for the plain VPT baseline."""

    def __init__(self, n_layers: int, n_prompts: int, dim: int, init_scale: float = 1.0):
        super().__init__()
        r = init_scale * math.sqrt(6.0 / dim)
        self.tokens = nn.Parameter(torch.empty(n_layers, n_prompts, dim).uniform_(-r, r))

    def flat(self) -> torch.Tensor:
        return self.tokens


def build_mask(cfg: EncoderConfig) -> torch.Tensor:
    """Boolean ``[T, T]`` allow-matrix (rows are queries).

    Only prompt-to-prompt pairs belonging to different (mode, group) cells are
    blocked; cls and patches see everything and prompts see cls and patches.
    """
    T = cfg.seq_len
    allow = torch.ones(T, T, dtype=torch.bool)
    n_cells = 2 * cfg.n_groups
    cell = torch.arange(n_cells).repeat_interleave(cfg.n_slots)
    same = cell[:, None] == cell[None, :]
    p = slice(1, 1 + cfg.n_prompts)
    allow[p, p] = same
    return allow


class GroupRepresentations(NamedTuple):
    cls: torch.Tensor  # [B, D]
    z_co: torch.Tensor  # [B, N_c, N_m, D]
    z_dc: torch.Tensor  # [B, N_c, N_m, D]
    patches: torch.Tensor  # [B, N_e, D]


class GroupPromptEncoder(nn.Module):
    def __init__(self, backbone: ViTBackbone, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        self.prompt_bank = GroupPromptBank(cfg)
        self.register_buffer("mask_allow", build_mask(cfg), persistent=False)

    def forward(self, images: torch.Tensor, return_attention: bool = False):
        c = self.cfg
        bias = mask_to_bias(self.mask_allow, dtype=self.prompt_bank.tokens.dtype)
        out = self.backbone.forward_tokens(images, self.prompt_bank.flat(), bias, return_attention)
        cls, prompts, E = out[:3]
        B = prompts.shape[0]
        z = prompts.reshape(B, 2, c.n_groups, c.n_slots, c.embed_dim)
        reps = GroupRepresentations(cls, z[:, 0], z[:, 1], E)
        if return_attention:
            return reps, out[3]
        return reps


def count_learnable_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def count_frozen_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if not p.requires_grad)
