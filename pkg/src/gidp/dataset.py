"""Submap database: distance-rule index, tuple sampling, synthetic worlds.

Positive/negative relations follow the benchmark convention: submaps at most
``pos_threshold`` meters apart (default 10) are positives, submaps more than
``neg_threshold`` meters apart (default 50) are negatives, and the band in
between is excluded from triplet sampling.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .pointcloud import PointCloud, load_pointcloud, save_pointcloud

log = logging.getLogger(__name__)

POS_THRESHOLD_M = 10.0
NEG_THRESHOLD_M = 50.0
MATCH_RADIUS_M = 25.0


@dataclass(frozen=True)
class SubmapRecord:
    """One submap: unique id, its cloud, and a planar world position in meters."""

    id: int
    cloud: PointCloud
    coord: np.ndarray  # (2,) easting/northing

    def __post_init__(self):
        coord = np.ascontiguousarray(self.coord, dtype=np.float64)
        if coord.shape != (2,):
            raise ValueError(f"coord must have shape (2,), got {coord.shape}")
        if not np.isfinite(coord).all():
            raise ValueError("coord must be finite")
        coord.setflags(write=False)
        object.__setattr__(self, "coord", coord)


@dataclass(frozen=True)
class DatasetIndex:
    """Records plus per-id positive and non-negative sets under the distance rules.

    positives(i) = ids j != i with dist <= pos_threshold;
    non_negatives(i) = ids j (including i) with dist <= neg_threshold.
    Valid negatives for i are everything outside non_negatives(i).
    """

    records: tuple[SubmapRecord, ...]
    positives: dict[int, tuple[int, ...]]
    non_negatives: dict[int, tuple[int, ...]]
    pos_threshold: float = POS_THRESHOLD_M
    neg_threshold: float = NEG_THRESHOLD_M
    by_id: dict[int, SubmapRecord] = field(repr=False, default_factory=dict)

    def negatives(self, anchor_id: int) -> tuple[int, ...]:
        """Ids strictly farther than neg_threshold from the anchor, ascending."""
        excluded = set(self.non_negatives[anchor_id])
        return tuple(r.id for r in self.records if r.id not in excluded)


def build_index(
    records: list[SubmapRecord],
    pos_threshold: float = POS_THRESHOLD_M,
    neg_threshold: float = NEG_THRESHOLD_M,
) -> DatasetIndex:
    """Compute the positive / non-negative sets for every record."""
    if not 0 < pos_threshold < neg_threshold:
        raise ValueError("thresholds must satisfy 0 < pos_threshold < neg_threshold")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    coords = np.array([r.coord for r in records])
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    positives: dict[int, tuple[int, ...]] = {}
    non_negatives: dict[int, tuple[int, ...]] = {}
    id_arr = np.array(ids)
    for i, rid in enumerate(ids):
        close = dist[i] <= pos_threshold
        close[i] = False
        positives[rid] = tuple(int(j) for j in sorted(id_arr[close]))
        non_negatives[rid] = tuple(int(j) for j in sorted(id_arr[dist[i] <= neg_threshold]))
    return DatasetIndex(
        records=tuple(records),
        positives=positives,
        non_negatives=non_negatives,
        pos_threshold=pos_threshold,
        neg_threshold=neg_threshold,
        by_id={r.id: r for r in records},
    )


class NoPositivesError(ValueError):
    """Anchor has no positives; training loops skip it with a diagnostic."""


def sample_training_tuple(
    index: DatasetIndex,
    anchor_id: int,
    num_pos: int,
    num_neg: int,
    rng: np.random.Generator,
) -> tuple[int, list[int], list[int]]:
    """Draw candidate positives/negatives for one anchor, uniformly without replacement.

    If fewer candidates exist than requested, all available ones are returned.

    Returns:
        (anchor_id, positive ids, negative ids); the three groups are disjoint.
    """
    pos_pool = index.positives[anchor_id]
    if not pos_pool:
        raise NoPositivesError(f"submap {anchor_id} has no positives within {index.pos_threshold} m")
    neg_pool = index.negatives(anchor_id)
    if not neg_pool:
        raise ValueError(f"submap {anchor_id} has no negatives beyond {index.neg_threshold} m")
    pos_ids = rng.choice(len(pos_pool), size=min(num_pos, len(pos_pool)), replace=False)
    neg_ids = rng.choice(len(neg_pool), size=min(num_neg, len(neg_pool)), replace=False)
    return (
        anchor_id,
        [pos_pool[i] for i in pos_ids],
        [neg_pool[i] for i in neg_ids],
    )


# ---------------------------------------------------------------------------
# synthetic world generation
# ---------------------------------------------------------------------------

# Per-revisit nuisance magnitudes. Tuned jointly: intra-site Chamfer must stay
# below cross-site Chamfer (generator sanity) while revisit descriptors from
# an untrained encoder stay confusable (so training has headroom to show).
_SCAN_YAW_MAX = np.pi / 36          # heading change between revisits
_SCAN_DENSITY_JITTER = (0.4, 1.6)   # per-primitive sampling-rate multiplier range
_SCAN_NOISE_SIGMA = 0.08            # sensor noise, meters
_SITE_BOX_SIZE_JITTER = 0.2         # per-site half-range around the common box size
_SITE_GRID_CELLS = 4                # primitives snap to this grid (per axis)

@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Layout of a synthetic benchmark world.

    Sites are distinct physical places revisited ``submaps_per_site`` times;
    revisit positions are offset at most ``intra_site_spread`` meters from the
    site center. ``site_spacing`` should exceed
    2*intra_site_spread + 2*pos_threshold so sites are unambiguous under the
    10 m rule (a warning is logged otherwise).
    """

    num_sites: int = 60
    submaps_per_site: int = 4
    site_spacing: float = 120.0
    intra_site_spread: float = 3.0
    points_per_cloud: int = 1024
    geometry_seed: int = 0

    def __post_init__(self):
        if self.num_sites < 1 or self.submaps_per_site < 1:
            raise ValueError("num_sites and submaps_per_site must be >= 1")
        if self.site_spacing <= 0 or self.intra_site_spread < 0:
            raise ValueError("site_spacing must be > 0 and intra_site_spread >= 0")
        if self.points_per_cloud < 1:
            raise ValueError("points_per_cloud must be >= 1")


def generate_synthetic_world(
    cfg: SyntheticWorldConfig, rng: np.random.Generator | None = None
) -> list[SubmapRecord]:
    """Generate submap records for a synthetic world, bit-reproducible from cfg.

    Site centers sit on a jittered grid with pairwise spacing >= site_spacing.
    Every site owns a procedural scene (ground plane, boxes, poles); each
    revisit re-samples points on the same primitives and adds sensor-like
    noise, so same-site clouds are geometrically similar and cross-site clouds
    are not. Clouds are normalized to [-1, 1] per cloud and quantized to
    float32 so they round-trip exactly through the binary file format.
    """
    if cfg.site_spacing <= 2 * cfg.intra_site_spread + 2 * POS_THRESHOLD_M:
        log.warning(
            "site_spacing %.1f m <= 2*spread + 2*pos_threshold = %.1f m; "
            "sites may be ambiguous under the positive rule",
            cfg.site_spacing,
            2 * cfg.intra_site_spread + 2 * POS_THRESHOLD_M,
        )
    if rng is None:
        rng = np.random.default_rng([cfg.geometry_seed, 0x5EED])

    side = int(np.ceil(np.sqrt(cfg.num_sites)))
    jitter_max = 0.2 * cfg.site_spacing
    cell = cfg.site_spacing + 2 * jitter_max
    records: list[SubmapRecord] = []
    for site in range(cfg.num_sites):
        gx, gy = site % side, site // side
        center = np.array([gx * cell, gy * cell]) + rng.uniform(-jitter_max, jitter_max, size=2)
        primitives = _site_primitives(np.random.default_rng([cfg.geometry_seed, site]))
        for rev in range(cfg.submaps_per_site):
            # uniform offset on the disk of radius intra_site_spread
            r = cfg.intra_site_spread * np.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * np.pi)
            coord = center + r * np.array([np.cos(theta), np.sin(theta)])
            cloud_rng = np.random.default_rng([cfg.geometry_seed, site, rev])
            pts = _sample_scene(primitives, cfg.points_per_cloud, cloud_rng)
            rec_id = site * cfg.submaps_per_site + rev
            records.append(
                SubmapRecord(
                    id=rec_id,
                    cloud=PointCloud(pts, source_id=f"site{site}_rev{rev}"),
                    coord=coord,
                )
            )
    return records


def _site_primitives(rng: np.random.Generator) -> list[dict]:
    """Procedural scene for one site: a ground plane plus boxes and poles.

    Every site holds the same primitive inventory (5 boxes, 3 poles poured
    into cells of a shared placement grid), so marginal point statistics are
    nearly identical across sites and an untrained encoder confuses them;
    what distinguishes a site is which cells its primitives occupy, which
    keeps cross-site scans geometrically far apart.
    """
    extent = 20.0  # site footprint in meters
    j = _SITE_BOX_SIZE_JITTER
    cell = extent / _SITE_GRID_CELLS
    centers = (np.arange(_SITE_GRID_CELLS) + 0.5) * cell - extent / 2
    cells = [(x, y) for x in centers for y in centers]
    chosen = rng.choice(len(cells), size=8, replace=False)
    prims: list[dict] = [{"kind": "plane", "extent": extent, "weight": 1.0}]
    for idx in chosen[:5]:
        prims.append(
            {
                "kind": "box",
                "center": np.array(cells[idx]) + rng.uniform(-0.5, 0.5, size=2),
                "size": np.array([2.0, 2.0, 2.5]) + rng.uniform(-j, j, size=3),
                "weight": 1.0,
            }
        )
    for idx in chosen[5:]:
        prims.append(
            {
                "kind": "pole",
                "center": np.array(cells[idx]) + rng.uniform(-0.5, 0.5, size=2),
                "height": float(4.0 + rng.uniform(-j, j)),
                "weight": 0.5,
            }
        )
    return prims


def _sample_scene(prims: list[dict], n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one scan: points on the primitives, a random scan heading, and noise.

    The per-revisit yaw and sampling-density jitter model scans of one place
    taken from different headings and viewpoints: the surfaces stay put, but
    how many returns each surface yields varies. Recognizing revisits despite
    both is the learnable part of the benchmark.
    """
    lo, hi = _SCAN_DENSITY_JITTER
    weights = np.array([p["weight"] for p in prims]) * rng.uniform(lo, hi, size=len(prims))
    counts = rng.multinomial(n_points, weights / weights.sum())
    chunks = []
    for prim, count in zip(prims, counts):
        if count == 0:
            continue
        if prim["kind"] == "plane":
            xy = rng.uniform(-prim["extent"] / 2, prim["extent"] / 2, size=(count, 2))
            z = np.zeros((count, 1))
            chunks.append(np.hstack([xy, z]))
        elif prim["kind"] == "box":
            chunks.append(_sample_box(prim, count, rng))
        else:
            cx, cy = prim["center"]
            z = rng.uniform(0, prim["height"], size=count)
            radial = rng.normal(0, 0.05, size=(count, 2))
            chunks.append(np.column_stack([cx + radial[:, 0], cy + radial[:, 1], z]))
    pts = np.vstack(chunks)
    if len(pts) < n_points:  # multinomial never under-allocates, guard anyway
        pad = pts[rng.integers(len(pts), size=n_points - len(pts))]
        pts = np.vstack([pts, pad])
    yaw = rng.uniform(-_SCAN_YAW_MAX, _SCAN_YAW_MAX)
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cos_y, -sin_y, 0.0], [sin_y, cos_y, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    pts = pts + rng.normal(0, _SCAN_NOISE_SIGMA, size=pts.shape)
    return _normalize_cloud(pts)


def _sample_box(prim: dict, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the surface of an upright box (faces picked by area)."""
    sx, sy, sz = prim["size"]
    cx, cy = prim["center"]
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])  # -x +x -y +y top
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    pts = np.empty((count, 3))
    for f in range(5):
        m = face == f
        if f in (0, 1):
            pts[m, 0] = (-sx / 2 if f == 0 else sx / 2)
            pts[m, 1] = u[m] * sy
            pts[m, 2] = (v[m] + 0.5) * sz
        elif f in (2, 3):
            pts[m, 0] = u[m] * sx
            pts[m, 1] = (-sy / 2 if f == 2 else sy / 2)
            pts[m, 2] = (v[m] + 0.5) * sz
        else:
            pts[m, 0] = u[m] * sx
            pts[m, 1] = v[m] * sy
            pts[m, 2] = sz
    pts[:, 0] += cx
    pts[:, 1] += cy
    return pts


def _normalize_cloud(pts: np.ndarray) -> np.ndarray:
    """Center on the centroid, scale the largest |coordinate| to 1, quantize to f32."""
    centered = pts - pts.mean(axis=0)
    scale = np.abs(centered).max()
    if scale > 0:
        centered = centered / scale
    return centered.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# query/database split
# ---------------------------------------------------------------------------

def split_query_database(
    records: list[SubmapRecord],
    query_fraction: float,
    rng: np.random.Generator,
    match_radius: float = MATCH_RADIUS_M,
    require_match: bool = True,
) -> tuple[list[SubmapRecord], list[SubmapRecord]]:
    """Partition records into disjoint (queries, database) sets.

    Records are grouped into clusters (connected components of the
    <= match_radius proximity graph, i.e. groups of mutually answerable
    submaps); each cluster contributes floor(query_fraction * size) queries,
    capped so at least one database record remains. When ``require_match`` is
    set, queries without any database record within match_radius are dropped
    with a diagnostic, matching the benchmark convention that every evaluated
    query has at least one true match.
    """
    if not 0 <= query_fraction <= 1:
        raise ValueError("query_fraction must be in [0, 1]")
    if not records:
        raise ValueError("cannot split an empty record list")
    coords = np.array([r.coord for r in records])
    labels = _cluster_labels(coords, match_radius)
    queries: list[SubmapRecord] = []
    database: list[SubmapRecord] = []
    for label in sorted(set(labels)):
        members = [i for i, l in enumerate(labels) if l == label]
        n_query = min(int(np.floor(query_fraction * len(members))), len(members) - 1)
        chosen = rng.choice(len(members), size=n_query, replace=False) if n_query else []
        chosen = set(int(c) for c in np.atleast_1d(chosen))
        for j, idx in enumerate(members):
            (queries if j in chosen else database).append(records[idx])
    if require_match and queries:
        db_coords = np.array([r.coord for r in database])
        kept = []
        for q in queries:
            nearest = np.sqrt(((db_coords - q.coord) ** 2).sum(axis=1)).min()
            if nearest <= match_radius:
                kept.append(q)
            else:
                log.warning(
                    "query submap %d dropped: nearest database record is %.1f m away "
                    "(> %.1f m match radius)",
                    q.id,
                    nearest,
                    match_radius,
                )
        queries = kept
    if not database:
        raise ValueError("split produced an empty database")
    return queries, database


def _cluster_labels(coords: np.ndarray, radius: float) -> list[int]:
    """Connected components of the pairwise <= radius graph (union-find)."""
    n = len(coords)
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    diff = coords[:, None, :] - coords[None, :, :]
    close = (diff ** 2).sum(axis=2) <= radius ** 2
    for i in range(n):
        for j in range(i + 1, n):
            if close[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    return [find(i) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk dataset layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
CLOUD_DIR = "clouds"


def save_dataset(records: list[SubmapRecord], out_dir: str | Path) -> Path:
    """Write manifest + binary cloud files; returns the manifest path.

    Manifest rows: ``id,easting_m,northing_m,relative_cloud_path``.
    """
    out_dir = Path(out_dir)
    cloud_dir = out_dir / CLOUD_DIR
    cloud_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "easting_m", "northing_m", "cloud"])
        for rec in records:
            rel = f"{CLOUD_DIR}/{rec.id}.pcb"
            save_pointcloud(rec.cloud, out_dir / rel, binary=True)
            writer.writerow([rec.id, repr(float(rec.coord[0])), repr(float(rec.coord[1])), rel])
    return manifest


def load_dataset(data_dir: str | Path) -> list[SubmapRecord]:
    """Load a dataset written by save_dataset."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    records = []
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[0] != "id":
            raise FormatError(f"{manifest}: missing manifest header")
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{manifest}: expected 4 columns, got {len(row)}")
            rec_id, easting, northing, rel = row
            cloud = load_pointcloud(data_dir / rel, source_id=rel)
            records.append(
                SubmapRecord(
                    id=int(rec_id),
                    cloud=cloud,
                    coord=np.array([float(easting), float(northing)]),
                )
            )
    if not records:
        raise FormatError(f"{manifest}: dataset is empty")
    return records
