"""Checkpoint files: one JSON manifest line followed by a little-endian float blob.

The manifest lists every parameter (``section.name``, shape, trainable flag,
byte offset) in blob order, then the EMA shadows if present, plus enough
metadata to rebuild the model. The attention mask is never stored; it is
regenerated from the encoder config.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from mlvpt.encoder import EncoderConfig, ViTBackbone
from mlvpt.labelgraph import Mode, Partition
from mlvpt.model import MLVPT, VanillaVPT, named_section_params

FORMAT = "mlvpt-ckpt-1"


def model_meta(model: nn.Module) -> dict:
    meta = {"mode": model.mode, "encoder": asdict(model.cfg), "n_classes": model.n_classes}
    if isinstance(model, MLVPT):
        meta["co_groups"] = model.partition_co.to_lists()
        meta["dc_groups"] = model.partition_dc.to_lists()
        meta["expert_hidden"] = model.expert_hidden
    elif isinstance(model, VanillaVPT):
        meta["n_prompts"] = model.n_prompts
    return meta


def build_model(meta: dict) -> nn.Module:
    cfg = EncoderConfig(**meta["encoder"])
    backbone = ViTBackbone(cfg)
    K = int(meta["n_classes"])
    if meta["mode"] == "ml_vpt":
        co = Partition(Mode.CO, tuple(tuple(g) for g in meta["co_groups"]), K)
        dc = Partition(Mode.DC, tuple(tuple(g) for g in meta["dc_groups"]), K)
        return MLVPT(backbone, cfg, co, dc, int(meta.get("expert_hidden", 5)))
    if meta["mode"] == "vanilla_vpt":
        return VanillaVPT(backbone, cfg, K, int(meta["n_prompts"]))
    raise ValueError(f"unknown model mode {meta['mode']!r}")


def _entries(named: list[tuple[str, torch.Tensor]], trainable: dict[str, bool], offset: int, itemsize: int):
    out = []
    for name, t in named:
        out.append({"name": name, "shape": list(t.shape), "trainable": trainable[name], "offset": offset})
        offset += t.numel() * itemsize
    return out, offset


def save_checkpoint(
    path: str | Path,
    named: list[tuple[str, torch.Tensor]],
    trainable: dict[str, bool],
    meta: Optional[dict] = None,
    ema: Optional[dict[str, torch.Tensor]] = None,
    dtype: str = "<f4",
) -> None:
    """Write parameters (and optional EMA shadows) in the given order."""
    itemsize = np.dtype(dtype).itemsize
    params, end = _entries(named, trainable, 0, itemsize)
    ema_named = [] if ema is None else list(ema.items())
    ema_entries, _ = _entries(ema_named, {k: True for k, _ in ema_named}, end, itemsize)
    manifest = {
        "format": FORMAT,
        "dtype": dtype,
        "meta": meta or {},
        "params": params,
        "ema": ema is not None,
        "ema_params": ema_entries,
    }
    blobs = [t.detach().cpu().numpy().astype(dtype).tobytes() for _, t in named + ema_named]
    data = json.dumps(manifest, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    Path(path).write_bytes(data)


def save_model(path: str | Path, model: nn.Module, ema: Optional[dict[str, torch.Tensor]] = None) -> None:
    """``ema`` is keyed by ``model.named_parameters()`` names; stored under section names."""
    named = named_section_params(model)
    trainable = {n: p.requires_grad for n, p in named}
    dtype = "<f8" if named[0][1].dtype == torch.float64 else "<f4"
    if ema is not None:
        section_name = {id(p): n for n, p in named}
        by_model_name = dict(model.named_parameters())
        ema = {section_name[id(by_model_name[k])]: v for k, v in ema.items()}
    save_checkpoint(path, named, trainable, model_meta(model), ema, dtype)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl])
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} checkpoint")
    dt = np.dtype(manifest["dtype"])
    body = raw[nl + 1 :]

    def take(entry):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + n * dt.itemsize
        if stop > len(body):
            raise ValueError(f"{path}: blob truncated while reading {entry['name']} at offset {start}")
        return np.frombuffer(body[start:stop], dtype=dt).reshape(entry["shape"]).copy()

    params = {e["name"]: take(e) for e in manifest["params"]}
    ema = {e["name"]: take(e) for e in manifest["ema_params"]}
    return manifest, params, ema


def load_model(path: str | Path, use_ema: bool = False) -> nn.Module:
    manifest, params, ema = read_checkpoint(path)
    model = build_model(manifest["meta"])
    if manifest["dtype"] == "<f8":
        model = model.double()
    with torch.no_grad():
        for name, p in named_section_params(model):
            src = ema[name] if use_ema and name in ema else params[name]
            p.copy_(torch.from_numpy(src).to(p.dtype))
    return model


def save_backbone(path: str | Path, backbone: ViTBackbone) -> None:
    named = [(f"backbone.{n}", p) for n, p in backbone.named_parameters()]
    meta = {"kind": "backbone", "encoder": asdict(backbone.cfg)}
    save_checkpoint(path, named, {n: False for n, _ in named}, meta)


def load_backbone(path: str | Path) -> ViTBackbone:
    manifest, params, _ = read_checkpoint(path)
    meta = manifest["meta"]
    if "encoder" not in meta:
        raise ValueError(f"{path}: checkpoint carries no encoder config")
    backbone = ViTBackbone(EncoderConfig(**meta["encoder"]))
    with torch.no_grad():
        for n, p in backbone.named_parameters():
            p.copy_(torch.from_numpy(params[f"backbone.{n}"]))
    return backbone
