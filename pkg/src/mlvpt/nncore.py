"""Differentiable building blocks for the prompt-tuned ViT.

Every layer is a plain function over ``torch`` tensors with explicit shape
checks, plus a thin ``nn.Module`` that owns the parameters. Weights follow the
``y = x @ W + b`` convention (``W`` is ``[in, out]``). Gradients come from
autograd and are checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn as nn

# Additive bias for blocked attention pairs; exp() of it underflows to exactly 0.
MASK_NEG = -1e9


class ShapeError(ValueError):
    """Raised when tensor shapes disagree."""


def _check_last(x: torch.Tensor, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ShapeError(f"{what}: expected trailing dim {n}, got shape {tuple(x.shape)}")


def linear(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if W.dim() != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {tuple(W.shape)}")
    _check_last(x, W.shape[0], "linear input")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {tuple(b.shape)} != ({W.shape[1]},)")
        y = y + b
    return y


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({D},)")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch subtracts the row max internally
    return torch.softmax(x, dim=dim)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def mask_to_bias(allow: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Boolean ``[T, T]`` allow-matrix to an additive attention bias."""
    if allow.dim() != 2 or allow.shape[0] != allow.shape[1]:
        raise ShapeError(f"mask must be square, got {tuple(allow.shape)}")
    if not bool(torch.diagonal(allow).all()):
        raise ValueError("mask must allow every token to attend to itself")
    bias = torch.zeros(allow.shape, dtype=dtype)
    return bias.masked_fill(~allow, MASK_NEG)


def multi_head_attention(
    x: torch.Tensor,
    w_qkv: torch.Tensor,
    b_qkv: torch.Tensor,
    w_out: torch.Tensor,
    b_out: torch.Tensor,
    n_heads: int,
    mask_bias: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``x`` of shape ``[..., T, D]``.

    ``mask_bias`` is added to the logits before the softmax. Returns the
    projected output, and the ``[..., H, T, T]`` weights if requested.
    """
    *lead, T, D = x.shape
    if D % n_heads:
        raise ShapeError(f"n_heads={n_heads} does not divide D={D}")
    if w_qkv.shape != (D, 3 * D) or w_out.shape != (D, D):
        raise ShapeError("attention weight shapes do not match embed dim")
    hd = D // n_heads
    qkv = linear(x, w_qkv, b_qkv)
    q, k, v = qkv.split(D, dim=-1)

    def heads(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*lead, T, n_heads, hd).transpose(-3, -2)

    q, k, v = heads(q), heads(k), heads(v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if mask_bias is not None:
        if mask_bias.shape != (T, T):
            raise ShapeError(f"mask shape {tuple(mask_bias.shape)} != ({T}, {T})")
        logits = logits + mask_bias.to(logits.dtype)
    attn = softmax(logits, dim=-1)
    out = (attn @ v).transpose(-3, -2).reshape(*lead, T, D)
    out = linear(out, w_out, b_out)
    if return_weights:
        return out, attn
    return out


def ffn(
    x: torch.Tensor,
    W1: torch.Tensor,
    b1: torch.Tensor,
    W2: torch.Tensor,
    b2: torch.Tensor,
    activation: Callable[[torch.Tensor], torch.Tensor] = gelu,
) -> torch.Tensor:
    return linear(activation(linear(x, W1, b1)), W2, b2)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``[..., C, H, W]`` to ``[..., N_e, C*P*P]``, patches in row-major grid order."""
    *lead, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(*lead, C, gh, patch, gw, patch)
    n = len(lead)
    perm = list(range(n)) + [n + 1, n + 3, n, n + 2, n + 4]
    return x.permute(*perm).reshape(*lead, gh * gw, C * patch * patch)


def patch_embed(
    images: torch.Tensor,
    proj: torch.Tensor,
    bias: torch.Tensor,
    pos: torch.Tensor,
    patch: int,
) -> torch.Tensor:
    tokens = linear(patchify(images, patch), proj, bias)
    if pos.shape != tokens.shape[-2:]:
        raise ShapeError(f"position embedding {tuple(pos.shape)} != {tuple(tokens.shape[-2:])}")
    return tokens + pos


# --- parameter-owning modules -------------------------------------------------


def uniform_(t: torch.Tensor, fan_in: int, fan_out: int, scale: float = 1.0) -> torch.Tensor:
    r = scale * math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return t.uniform_(-r, r)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, init_scale: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(uniform_(torch.empty(d_in, d_out), d_in, d_out, init_scale))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"n_heads={n_heads} does not divide dim={dim}")
        self.n_heads = n_heads
        self.w_qkv = nn.Parameter(uniform_(torch.empty(dim, 3 * dim), dim, dim))
        self.b_qkv = nn.Parameter(torch.zeros(3 * dim))
        self.w_out = nn.Parameter(uniform_(torch.empty(dim, dim), dim, dim))
        self.b_out = nn.Parameter(torch.zeros(dim))

    def forward(self, x, mask_bias=None, return_weights=False):
        return multi_head_attention(
            x, self.w_qkv, self.b_qkv, self.w_out, self.b_out, self.n_heads, mask_bias, return_weights
        )


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, activation=gelu):
        super().__init__()
        self.activation = activation
        self.w1 = nn.Parameter(uniform_(torch.empty(dim, hidden), dim, hidden))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(uniform_(torch.empty(hidden, dim), hidden, dim))
        self.b2 = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ffn(x, self.w1, self.b1, self.w2, self.b2, self.activation)


class Block(nn.Module):
    """Pre-LN transformer block: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4, eps: float = 1e-6):
        super().__init__()
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, n_heads)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x, mask_bias=None, return_weights=False):
        a = self.attn(self.norm1(x), mask_bias, return_weights)
        if return_weights:
            a, w = a
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return (x, w) if return_weights else x


class PatchEmbed(nn.Module):
    def __init__(self, image_size: int, patch: int, channels: int, dim: int):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f"image size {image_size} not divisible by patch {patch}")
        self.patch = patch
        self.n_patches = (image_size // patch) ** 2
        fan_in = channels * patch * patch
        self.proj = nn.Parameter(uniform_(torch.empty(fan_in, dim), fan_in, dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.pos = nn.Parameter(torch.randn(self.n_patches, dim) * 0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return patch_embed(images, self.proj, self.bias, self.pos, self.patch)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
