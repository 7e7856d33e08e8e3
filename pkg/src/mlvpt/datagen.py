"""Synthetic multi-label images with planted label co-occurrence.

Every class owns a fixed random template drawn in its own patch-grid cell, so
visual evidence for a class is local while label statistics are correlated
through planted groups. Besides the usual train/val/test splits the module
builds two shifted probes: a split with independently sampled labels (same
marginals, no co-occurrence) and a removed-object split where one member of a
co-occurring pair is always present and the other always absent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

SPLIT_STREAMS = {"templates": 0, "train": 1, "val": 2, "test": 3, "decorrelated": 4, "probe": 5, "pretrain": 6}


class DatasetError(ValueError):
    """Missing, malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 12
    n_planted_groups: int = 3
    p_group: float = 0.4
    p_in: float = 0.9
    p_bg: float = 0.05
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    noise_sigma: float = 1.5
    rng_seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    n_pretrain: int = 2000
    max_resample: int = 100

    def __post_init__(self) -> None:
        for name in ("p_group", "p_in", "p_bg"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if not 1 <= self.n_planted_groups <= self.n_classes:
            raise ValueError("n_planted_groups must be in [1, n_classes]")
        if self.n_classes > self.n_cells:
            raise ValueError(f"{self.n_classes} classes do not fit in {self.n_cells} grid cells")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_cells(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def marginal(self) -> float:
        """Per-class positive rate implied by the generative process (before resampling)."""
        return 1.0 - (1.0 - self.p_group * self.p_in) * (1.0 - self.p_bg)


@dataclass
class Split:
    name: str
    labels: np.ndarray  # [n, K] int8
    images: np.ndarray  # [n, C, H, W] float32
    extra: dict = field(default_factory=dict)


def planted_groups(cfg: SynthConfig) -> list[list[int]]:
    """Contiguous blocks of near-equal size."""
    bounds = np.linspace(0, cfg.n_classes, cfg.n_planted_groups + 1).round().astype(int)
    return [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _stream(cfg: SynthConfig, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence(cfg.rng_seed).spawn(len(SPLIT_STREAMS))[SPLIT_STREAMS[name]]
    return np.random.default_rng(seq)


def class_templates(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(templates [K, C, P, P], cell index per class)``.

    Templates are zero-mean with unit mean-square pixel value.
    """
    rng = _stream(cfg, "templates")
    P = cfg.patch_size
    t = rng.standard_normal((cfg.n_classes, cfg.channels, P, P))
    t -= t.mean(axis=(1, 2, 3), keepdims=True)
    t /= np.sqrt((t**2).mean(axis=(1, 2, 3), keepdims=True))
    cells = rng.permutation(cfg.n_cells)[: cfg.n_classes]
    return t, cells


def cell_slice(cfg: SynthConfig, cell: int) -> tuple[slice, slice]:
    g = cfg.image_size // cfg.patch_size
    r, c = divmod(int(cell), g)
    P = cfg.patch_size
    return slice(r * P, (r + 1) * P), slice(c * P, (c + 1) * P)


def _resample_rows(sample_row, n: int, cfg: SynthConfig) -> np.ndarray:
    rows = []
    for _ in range(n):
        for _ in range(cfg.max_resample):
            y = sample_row()
            if y.any():
                break
        else:
            raise ValueError(f"could not draw a non-empty label set in {cfg.max_resample} attempts")
        rows.append(y)
    return np.stack(rows).astype(np.int8)


def sample_correlated_labels(cfg: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    groups = planted_groups(cfg)
    member = np.zeros((len(groups), cfg.n_classes), dtype=bool)
    for g, cls in enumerate(groups):
        member[g, cls] = True

    def row() -> np.ndarray:
        active = rng.random(len(groups)) < cfg.p_group
        on_in = rng.random(cfg.n_classes) < cfg.p_in
        on_bg = rng.random(cfg.n_classes) < cfg.p_bg
        return (member[active].any(axis=0) & on_in) | on_bg

    return _resample_rows(row, n, cfg)


def sample_independent_labels(
    cfg: SynthConfig, marginals: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    marginals = np.asarray(marginals, dtype=np.float64)
    return _resample_rows(lambda: rng.random(len(marginals)) < marginals, n, cfg)


def render(cfg: SynthConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    templates, cells = class_templates(cfg)
    n = len(labels)
    S = cfg.image_size
    images = np.zeros((n, cfg.channels, S, S))
    for k in range(cfg.n_classes):
        rs, cs = cell_slice(cfg, cells[k])
        on = labels[:, k].astype(bool)
        images[on, :, rs, cs] += templates[k]
    images += cfg.noise_sigma * rng.standard_normal(images.shape)
    return images.astype(np.float32)


def _correlated_split(cfg: SynthConfig, name: str, n: int) -> Split:
    rng = _stream(cfg, name)
    labels = sample_correlated_labels(cfg, n, rng)
    return Split(name, labels, render(cfg, labels, rng))


def generate(cfg: SynthConfig) -> dict[str, Split]:
    return {
        "train": _correlated_split(cfg, "train", cfg.n_train),
        "val": _correlated_split(cfg, "val", cfg.n_val),
        "test": _correlated_split(cfg, "test", cfg.n_test),
    }


def decorrelated_split(cfg: SynthConfig, n: Optional[int] = None) -> Split:
    """Independent labels with the correlated test split's empirical marginals."""
    n = cfg.n_test if n is None else n
    ref = sample_correlated_labels(cfg, cfg.n_test, _stream(cfg, "test"))
    marginals = ref.mean(axis=0)
    rng = _stream(cfg, "decorrelated")
    labels = sample_independent_labels(cfg, marginals, n, rng)
    return Split("decorrelated", labels, render(cfg, labels, rng), {"marginals": marginals.tolist()})


def removed_object_probe(cfg: SynthConfig, pair: tuple[int, int], n: Optional[int] = None) -> Split:
    """Class ``i`` always drawn, class ``j`` never; other labels follow the correlated process."""
    i, j = (int(v) for v in pair)
    if i == j or not (0 <= i < cfg.n_classes and 0 <= j < cfg.n_classes):
        raise ValueError(f"invalid probe pair {pair}")
    n = cfg.n_test if n is None else n
    rng = _stream(cfg, "probe")
    labels = sample_correlated_labels(cfg, n, rng)
    labels[:, i] = 1
    labels[:, j] = 0
    return Split("probe", labels, render(cfg, labels, rng), {"present_class": i, "removed_class": j})


def pretrain_split(cfg: SynthConfig, n: Optional[int] = None) -> Split:
    """Independent labels at the configured marginal rate, for backbone warm-up."""
    n = cfg.n_pretrain if n is None else n
    rng = _stream(cfg, "pretrain")
    labels = sample_independent_labels(cfg, np.full(cfg.n_classes, cfg.marginal), n, rng)
    return Split("pretrain", labels, render(cfg, labels, rng))


# --- file I/O ------------------------------------------------------------------


def write_split(split: Split, out_dir: str | Path, cfg: SynthConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels_name = f"{split.name}.labels.csv"
    images_name = f"{split.name}.images.bin"
    K = split.labels.shape[1]
    with open(out / labels_name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"c{k}" for k in range(K)])
        for i, row in enumerate(split.labels):
            w.writerow([i] + [int(v) for v in row])
    (out / images_name).write_bytes(np.ascontiguousarray(split.images, dtype="<f4").tobytes())
    n, C, H, W = split.images.shape
    manifest = {
        "split": split.name,
        "n": n,
        "K": K,
        "channels": C,
        "height": H,
        "width": W,
        "labels_path": labels_name,
        "images_path": images_name,
        "planted_groups": planted_groups(cfg),
        "config": asdict(cfg),
        **split.extra,
    }
    path = out / f"{split.name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def write_dataset(
    cfg: SynthConfig,
    out_dir: str | Path,
    decorrelated: bool = True,
    probe: Optional[tuple[int, int]] = None,
    pretrain: bool = True,
) -> dict[str, Path]:
    splits = list(generate(cfg).values())
    if decorrelated:
        splits.append(decorrelated_split(cfg))
    if probe is not None:
        splits.append(removed_object_probe(cfg, probe))
    if pretrain:
        splits.append(pretrain_split(cfg))
    return {s.name: write_split(s, out_dir, cfg) for s in splits}


def read_labels_csv(path: str | Path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DatasetError(f"missing label file {path}") from exc
    if not rows or rows[0][:1] != ["id"] or len(rows[0]) < 3:
        raise DatasetError(f"{path}: header must start with 'id' followed by one column per class")
    K = len(rows[0]) - 1
    out = np.zeros((len(rows) - 1, K), dtype=np.int8)
    for r, row in enumerate(rows[1:]):
        if len(row) != K + 1 or any(v not in ("0", "1") for v in row[1:]):
            raise DatasetError(f"{path}: malformed row {r + 1}: {row!r}")
        out[r] = [int(v) for v in row[1:]]
    return out


@dataclass
class Dataset:
    manifest: dict
    labels: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return self.iterate()

    def iterate(self, shuffle_seed: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for i in order:
            yield self.images[i], self.labels[i]


def load_dataset(manifest_path: str | Path) -> Dataset:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON manifest") from exc
    labels = read_labels_csv(path.parent / manifest["labels_path"])
    n, C, H, W = (int(manifest[k]) for k in ("n", "channels", "height", "width"))
    if len(labels) != n or labels.shape[1] != int(manifest["K"]):
        raise DatasetError(f"{path}: label CSV has shape {labels.shape}, manifest says n={n}, K={manifest['K']}")
    blob_path = path.parent / manifest["images_path"]
    try:
        raw = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing image blob {blob_path}") from exc
    expected = n * C * H * W * 4
    if len(raw) != expected:
        raise DatasetError(
            f"{blob_path}: image blob ends at byte offset {len(raw)}, expected {expected} bytes"
            f" (image {len(raw) // (C * H * W * 4)} incomplete)"
            if len(raw) < expected
            else f"{blob_path}: {len(raw) - expected} trailing bytes after offset {expected}"
        )
    images = np.frombuffer(raw, dtype="<f4").reshape(n, C, H, W).astype(np.float32)
    return Dataset(manifest, labels, images)
