"""Class grouping from label co-occurrence statistics.

Builds the conditional co-occurrence matrix from a binary label matrix,
turns it into a correlative (CO) or discriminative (DC) affinity, and
partitions the classes by spectral clustering on the normalized Laplacian.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Mode(str, enum.Enum):
    CO = "co"
    DC = "dc"


@dataclass(frozen=True)
class GroupingConfig:
    n_groups: int = 5
    tau: float = 2.0
    degree_epsilon: float = 1e-8
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_groups < 1:
            raise ValueError(f"n_groups must be >= 1, got {self.n_groups}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.degree_epsilon <= 0:
            raise ValueError("degree_epsilon must be > 0")
        if self.kmeans_restarts < 1 or self.kmeans_max_iter < 1:
            raise ValueError("kmeans_restarts and kmeans_max_iter must be >= 1")


@dataclass(frozen=True)
class Partition:
    """Disjoint class subsets covering ``range(n_classes)``.

    Groups are stored in canonical order: members ascending, groups ordered by
    their smallest member. Two partitions that differ only by group relabeling
    therefore compare equal.
    """

    mode: Mode
    groups: tuple[tuple[int, ...], ...]
    n_classes: int = field(default=-1)

    def __post_init__(self) -> None:
        canon = tuple(sorted(tuple(sorted(int(c) for c in g)) for g in self.groups))
        object.__setattr__(self, "groups", canon)
        object.__setattr__(self, "mode", Mode(self.mode))
        members = [c for g in canon for c in g]
        n = self.n_classes if self.n_classes >= 0 else len(members)
        object.__setattr__(self, "n_classes", n)
        if any(len(g) == 0 for g in canon):
            raise ValueError("partition contains an empty group")
        if sorted(members) != list(range(n)):
            raise ValueError("groups must be disjoint and cover every class exactly once")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_of(self) -> tuple[int, ...]:
        out = [0] * self.n_classes
        for t, g in enumerate(self.groups):
            for c in g:
                out[c] = t
        return tuple(out)

    @classmethod
    def from_assignments(cls, mode: Mode | str, assign: np.ndarray) -> "Partition":
        assign = np.asarray(assign)
        groups = [np.flatnonzero(assign == a).tolist() for a in np.unique(assign)]
        return cls(Mode(mode), tuple(tuple(g) for g in groups), len(assign))

    def to_lists(self) -> list[list[int]]:
        return [list(g) for g in self.groups]


def validate_labels(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 2:
        raise ValueError(f"labels must be 2-D (N, K), got shape {y.shape}")
    n, k = y.shape
    if n < 1 or k < 2:
        raise ValueError(f"need N >= 1 and K >= 2, got N={n}, K={k}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("label entries must be exactly 0 or 1")
    return y.astype(np.int64)


def build_cooccurrence(labels: np.ndarray) -> np.ndarray:
    """Return ``S`` with ``S[i, j] = P(label j present | label i present)``.

    Rows of classes without positives are left all-zero and reported with a
    ``RuntimeWarning``.
    """
    y = validate_labels(labels).astype(np.float64)
    counts = y.T @ y
    pos = np.diag(counts).copy()
    empty = np.flatnonzero(pos == 0)
    if empty.size:
        warnings.warn(
            f"classes with zero positive examples: {empty.tolist()}",
            RuntimeWarning,
            stacklevel=2,
        )
    S = np.zeros_like(counts)
    has = pos > 0
    S[has] = counts[has] / pos[has, None]
    return S


def build_affinity(S: np.ndarray, tau: float, mode: Mode | str) -> np.ndarray:
    """Symmetric affinity from ``S``.

    CO: ``(S**(1/tau) + S.T**(1/tau)) / 2``; DC: its complement w.r.t. the
    all-ones matrix, so CO + DC == 1 entrywise.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"S must be square, got shape {S.shape}")
    if (S < 0).any() or (S > 1).any():
        raise ValueError("S entries must lie in [0, 1]")
    root = S ** (1.0 / tau)
    m_co = (root + root.T) / 2.0
    if Mode(mode) is Mode.CO:
        return m_co
    return np.clip(1.0 - m_co, 0.0, 1.0)


def normalized_laplacian(M: np.ndarray, degree_epsilon: float = 1e-8) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if (M < 0).any():
        raise ValueError("affinity must be nonnegative")
    deg = np.maximum(M.sum(axis=1), degree_epsilon)
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = np.eye(len(M)) - inv_sqrt[:, None] * M * inv_sqrt[None, :]
    return (L + L.T) / 2.0


def spectral_embedding(M: np.ndarray, n_components: int, degree_epsilon: float = 1e-8) -> np.ndarray:
    """Row-normalized eigenvectors of the ``n_components`` smallest eigenvalues."""
    L = normalized_laplacian(M, degree_epsilon)
    _, vecs = np.linalg.eigh(L)
    F = vecs[:, :n_components]
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return np.divide(F, norms, out=np.zeros_like(F), where=norms > 0)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen center
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _repair_empty(X: np.ndarray, assign: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    assign = assign.copy()
    for c in range(k):
        if (assign == c).any():
            continue
        sizes = np.bincount(assign, minlength=k)
        movable = sizes[assign] > 1
        dist = ((X - centers[assign]) ** 2).sum(axis=1)
        dist[~movable] = -1.0
        assign[int(np.argmax(dist))] = c
    return assign


def kmeans(
    X: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iter: int = 100,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Lloyd's k-means with k-means++ seeding; best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(X, k, rng)
        assign = np.full(n, -1)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = _repair_empty(X, d2.argmin(axis=1), centers, k)
            if np.array_equal(new, assign):
                break
            assign = new
            centers = np.stack([X[assign == c].mean(axis=0) for c in range(k)])
        inertia = float(((X - centers[assign]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_assign, best_inertia = assign.copy(), inertia
    return best_assign, best_inertia


def spectral_cluster(M: np.ndarray, cfg: GroupingConfig, mode: Mode | str = Mode.CO) -> Partition:
    M = np.asarray(M, dtype=np.float64)
    K = len(M)
    if cfg.n_groups > K:
        raise ValueError(f"n_groups={cfg.n_groups} exceeds number of classes K={K}")
    if cfg.n_groups == 1:
        return Partition(mode, (tuple(range(K)),), K)
    F = spectral_embedding(M, cfg.n_groups, cfg.degree_epsilon)
    assign, _ = kmeans(F, cfg.n_groups, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.rng_seed)
    return Partition.from_assignments(mode, assign)


def group_classes(labels: np.ndarray, cfg: GroupingConfig) -> tuple[Partition, Partition]:
    """CO and DC partitions of the classes in ``labels``."""
    S = build_cooccurrence(labels)
    co = spectral_cluster(build_affinity(S, cfg.tau, Mode.CO), cfg, Mode.CO)
    dc = spectral_cluster(build_affinity(S, cfg.tau, Mode.DC), cfg, Mode.DC)
    return co, dc


# --- serialization -----------------------------------------------------------


def write_matrix(path: str | Path, M: np.ndarray) -> None:
    """JSON header line ``{"rows", "cols"}`` followed by little-endian float64 data."""
    M = np.ascontiguousarray(M, dtype="<f8")
    if M.ndim != 2:
        raise ValueError("only 2-D matrices can be dumped")
    header = json.dumps({"rows": M.shape[0], "cols": M.shape[1]}).encode() + b"\n"
    Path(path).write_bytes(header + M.tobytes(order="C"))


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    meta = json.loads(raw[:nl])
    rows, cols = int(meta["rows"]), int(meta["cols"])
    body = raw[nl + 1 :]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols * 8} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


def grouping_to_json(co: Partition, dc: Partition, cfg: GroupingConfig, S_path: str | None = None) -> str:
    doc = {
        "K": co.n_classes,
        "n_groups": cfg.n_groups,
        "tau": cfg.tau,
        "seed": cfg.rng_seed,
        "co_groups": co.to_lists(),
        "dc_groups": dc.to_lists(),
    }
    if S_path is not None:
        doc["S_path"] = S_path
    return json.dumps(doc, indent=2) + "\n"


def load_grouping(path: str | Path) -> tuple[Partition, Partition]:
    doc = json.loads(Path(path).read_text())
    K = int(doc["K"])
    return (
        Partition(Mode.CO, tuple(tuple(g) for g in doc["co_groups"]), K),
        Partition(Mode.DC, tuple(tuple(g) for g in doc["dc_groups"]), K),
    )
