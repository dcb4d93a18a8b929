"""Descriptor store, exact KNN, inverse-distance post-enhancement, and recall metrics.

Enhancement blends each descriptor with its K nearest neighbors in a reference
set R:

    v_hat = lambda * v + (1 - lambda) * sum_k w_k * v_k,
    w_k = softmax over neighbors of -||v - v_k||

R is the training descriptors (inductive) or train + database + queries
(transductive). All enhancements read the original, pre-enhancement
descriptors; the result is not re-normalized. Retrieval and evaluation use
exact Euclidean scans with ties broken by lower id.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

STORE_MAGIC = b"GIDPDS01"
ORIGINS = ("train", "database", "query")
DEFAULT_LAMBDA = 0.2
DEFAULT_NEIGHBORS = 5


@dataclass
class DescriptorStore:
    """Global descriptors with submap ids and planar coordinates.

    Descriptors are float64 in memory and float32 on disk. Fresh encoder
    outputs are unit-norm; enhanced descriptors generally are not.
    """

    ids: np.ndarray          # (n,) uint64
    descriptors: np.ndarray  # (n, C) float64
    coords: np.ndarray       # (n, 2) float64
    origin: str = "database"

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        n = len(self.ids)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != n or self.coords.shape != (n, 2):
            raise ValueError("ids, descriptors, and coords must have matching lengths")
        if n and len(np.unique(self.ids)) != n:
            raise ValueError("descriptor store ids must be unique")
        if not (np.isfinite(self.descriptors).all() and np.isfinite(self.coords).all()):
            raise ValueError("descriptor store holds non-finite values")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def check_unit_norm(self, tol: float = 1e-6) -> None:
        norms = np.sqrt((self.descriptors ** 2).sum(axis=1))
        if len(self) and np.abs(norms - 1.0).max() > tol:
            raise ValueError("descriptors are not unit-norm within 1e-6")

    def save(self, path: str | Path) -> None:
        """Binary layout: magic, u32 count, u32 dim, then per entry
        u64 id, two f64 coords, dim f32 components."""
        dtype = _entry_dtype(self.dim)
        table = np.empty(len(self), dtype=dtype)
        table["id"] = self.ids
        table["coord"] = self.coords
        table["desc"] = self.descriptors.astype("<f4")
        with open(Path(path), "wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<II", len(self), self.dim))
            f.write(table.tobytes())

    @classmethod
    def load(cls, path: str | Path, origin: str = "database") -> "DescriptorStore":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"descriptor store not found: {path}")
        raw = path.read_bytes()
        if raw[:8] != STORE_MAGIC:
            raise FormatError(f"{path}: not a gidp descriptor store")
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", raw[8:16])
        dtype = _entry_dtype(dim)
        expected = 16 + count * dtype.itemsize
        if len(raw) != expected:
            raise FormatError(
                f"{path}: entry count mismatch (header declares {count}, payload size differs)"
            )
        table = np.frombuffer(raw[16:], dtype=dtype)
        return cls(
            ids=table["id"].copy(),
            descriptors=table["desc"].astype(np.float64),
            coords=table["coord"].copy(),
            origin=origin,
        )


def _entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("coord", "<f8", (2,)), ("desc", "<f4", (dim,))])


@dataclass(frozen=True)
class EnhanceConfig:
    """Blend weight, neighbor count, reference-set mode, and per-side toggles."""

    lam: float = DEFAULT_LAMBDA
    neighbors: int = DEFAULT_NEIGHBORS
    mode: str = "inductive"
    enhance_queries: bool = True
    enhance_database: bool = True

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must be in [0,1]")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.mode not in ("inductive", "transductive"):
            raise ValueError("mode must be 'inductive' or 'transductive'")


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def knn(
    store: DescriptorStore,
    query: np.ndarray,
    k: int,
    exclude_id: int | None = None,
) -> list[tuple[int, float]]:
    """Exact k nearest entries by Euclidean distance, ascending, ties by lower id.

    ``exclude_id`` removes the query's own entry from consideration.
    """
    if len(store) == 0:
        raise ValueError("cannot search an empty store")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (store.dim,):
        raise ValueError(f"query dimension {query.shape} does not match store dim {store.dim}")
    mask = np.ones(len(store), dtype=bool)
    if exclude_id is not None:
        mask &= store.ids != np.uint64(exclude_id)
    available = int(mask.sum())
    if k < 1 or k > available:
        raise ValueError(f"k={k} out of range for a store with {available} searchable entries")
    dists = np.sqrt(((store.descriptors[mask] - query) ** 2).sum(axis=1))
    ids = store.ids[mask]
    order = np.lexsort((ids, dists))[:k]
    return [(int(ids[i]), float(dists[i])) for i in order]


# ---------------------------------------------------------------------------
# inverse-distance enhancement
# ---------------------------------------------------------------------------

def _neighbor_weights(query: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Softmax over negative Euclidean distances, stabilized by the max exponent."""
    d = np.sqrt(((neighbors - query) ** 2).sum(axis=1))
    e = -d
    e = e - e.max()
    w = np.exp(e)
    return w / w.sum()


def enhance_descriptor(v: np.ndarray, neighbors: np.ndarray, lam: float) -> np.ndarray:
    """Blend one descriptor with its neighbors; lambda = 1 returns it unchanged.

    The output is intentionally not re-normalized.
    """
    if not 0 <= lam <= 1:
        raise ValueError("lambda must be in [0,1]")
    v = np.asarray(v, dtype=np.float64)
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if neighbors.shape[0] < 1:
        raise ValueError("at least one neighbor is required")
    if neighbors.shape[1] != v.shape[0]:
        raise ValueError("neighbor dimension does not match the descriptor")
    if lam == 1.0:
        return v.copy()
    w = _neighbor_weights(v, neighbors)
    return lam * v + (1 - lam) * (w @ neighbors)


def enhance_all(
    query_store: DescriptorStore,
    database_store: DescriptorStore,
    train_store: DescriptorStore,
    cfg: EnhanceConfig,
) -> tuple[DescriptorStore, DescriptorStore]:
    """Enhance every query and database descriptor from its K nearest references.

    The reference set is the train store (inductive) or train + database +
    queries (transductive). Each entry's own id is excluded from its neighbor
    search; all neighbor lookups read the original input descriptors, so no
    enhancement cascades into another.
    """
    stores = {"query": query_store, "database": database_store, "train": train_store}
    dims = {s.dim for s in stores.values()}
    if len(dims) != 1:
        raise ValueError(f"stores disagree on descriptor dimension: {sorted(dims)}")
    if cfg.mode == "inductive":
        ref_ids = train_store.ids
        ref_descs = train_store.descriptors
    else:
        # same id across stores means the same submap: keep one copy
        ref_ids = np.concatenate([train_store.ids, database_store.ids, query_store.ids])
        ref_descs = np.vstack(
            [train_store.descriptors, database_store.descriptors, query_store.descriptors]
        )
        _, first = np.unique(ref_ids, return_index=True)
        first.sort()
        ref_ids = ref_ids[first]
        ref_descs = ref_descs[first]
    reference = DescriptorStore(
        ids=ref_ids,
        descriptors=ref_descs,
        coords=np.zeros((len(ref_ids), 2)),
        origin="train",
    )
    ref_index = {int(rid): j for j, rid in enumerate(reference.ids)}

    def enhanced(store: DescriptorStore, enabled: bool) -> DescriptorStore:
        if not enabled or cfg.lam == 1.0:
            new = store.descriptors.copy()
        else:
            new = np.empty_like(store.descriptors)
            for i in range(len(store)):
                hits = knn(reference, store.descriptors[i], cfg.neighbors, exclude_id=int(store.ids[i]))
                nb = reference.descriptors[[ref_index[hid] for hid, _ in hits]]
                new[i] = enhance_descriptor(store.descriptors[i], nb, cfg.lam)
        return DescriptorStore(
            ids=store.ids.copy(), descriptors=new, coords=store.coords.copy(), origin=store.origin
        )

    return enhanced(query_store, cfg.enhance_queries), enhanced(database_store, cfg.enhance_database)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Recall metrics plus the per-query rank of the first correct match."""

    recall_top1: float
    recall_top1pct: float
    num_queries_evaluated: int
    database_size: int
    top1pct_cutoff: int
    match_radius: float
    ranks: list[int] = field(default_factory=list)
    config_echo: dict[str, str] = field(default_factory=dict)


def top1pct_cutoff(database_size: int) -> int:
    """Top-1% rank cutoff: round-half-up of size/100, at least 1."""
    return max(int(np.floor(database_size / 100.0 + 0.5)), 1)


def evaluate(
    query_store: DescriptorStore,
    database_store: DescriptorStore,
    match_radius: float = 25.0,
    config_echo: dict[str, str] | None = None,
) -> EvalReport:
    """Rank the database per query and score recall@1 and recall@top-1%.

    A retrieved submap is correct when its world coordinate lies within
    ``match_radius`` meters of the query's. Queries with no correct match
    anywhere in the database are dropped with a diagnostic and excluded from
    the denominators.
    """
    if len(query_store) == 0 or len(database_store) == 0:
        raise ValueError("evaluation needs non-empty query and database stores")
    if query_store.dim != database_store.dim:
        raise ValueError("query and database descriptor dimensions differ")
    cutoff = top1pct_cutoff(len(database_store))
    ranks: list[int] = []
    for i in range(len(query_store)):
        geo = np.sqrt(((database_store.coords - query_store.coords[i]) ** 2).sum(axis=1))
        correct = geo <= match_radius
        if not correct.any():
            log.warning(
                "query %d dropped from evaluation: no database entry within %.1f m",
                int(query_store.ids[i]),
                match_radius,
            )
            continue
        d = np.sqrt(((database_store.descriptors - query_store.descriptors[i]) ** 2).sum(axis=1))
        order = np.lexsort((database_store.ids, d))
        ranks.append(int(np.nonzero(correct[order])[0][0]) + 1)
    if not ranks:
        raise ValueError("no evaluable query has a true match in the database")
    rank_arr = np.array(ranks)
    return EvalReport(
        recall_top1=float((rank_arr == 1).mean() * 100.0),
        recall_top1pct=float((rank_arr <= cutoff).mean() * 100.0),
        num_queries_evaluated=len(ranks),
        database_size=len(database_store),
        top1pct_cutoff=cutoff,
        match_radius=match_radius,
        ranks=ranks,
        config_echo=dict(config_echo or {}),
    )


def format_report(report: EvalReport) -> str:
    """Plain-text report with a fixed field order (machine-diffable)."""
    lines = [
        "gidp-eval-report 1",
        f"num_queries_evaluated {report.num_queries_evaluated}",
        f"database_size {report.database_size}",
        f"top1pct_cutoff {report.top1pct_cutoff}",
        f"match_radius_m {report.match_radius!r}",
        f"recall_top1 {report.recall_top1!r}",
        f"recall_top1pct {report.recall_top1pct!r}",
    ]
    lines.extend(f"config {key} {report.config_echo[key]}" for key in sorted(report.config_echo))
    lines.append("ranks " + " ".join(str(r) for r in report.ranks))
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(format_report(report))
