from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np
import pytest
import torch

from mlvpt.encoder import EncoderConfig

ROOT = Path(__file__).resolve().parents[1]
SCHEMAS = ROOT / "docs" / "schemas"


def central_difference(f: Callable[[], torch.Tensor], t: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. ``t``, perturbing ``t`` in place."""
    grad = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max absolute deviation scaled by the largest numeric gradient magnitude."""
    scale = max(numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def gradcheck_tensors(f: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], h: float = 1e-5) -> dict[str, float]:
    for t in tensors.values():
        t.grad = None
    f().backward()
    analytic = {k: t.grad.detach().clone() for k, t in tensors.items()}
    return {k: rel_error(analytic[k], central_difference(f, t, h)) for k, t in tensors.items()}


@pytest.fixture
def toy_cfg() -> EncoderConfig:
    return EncoderConfig(
        n_layers=2, embed_dim=16, n_heads=2, patch_size=4, image_size=8, channels=1, n_groups=2, n_slots=2
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# --- acceptance reporting -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
