"""Point-cloud value type, file I/O, and the stochastic training augmentations.

Clouds are immutable (N, 3) float64 arrays. The four augmentations (jitter,
random point removal, random block removal, random shear) are pure functions
of (input, parameters, rng) so that training runs are reproducible bit-for-bit
from a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

TEXT_MAGIC = "PCD1"
BINARY_MAGIC = b"GIDPPC01"


@dataclass(frozen=True)
class PointCloud:
    """One submap/scene as an ordered set of 3-D points.

    Args:
        points: (N, 3) array of coordinates, N >= 1, all finite. Stored as a
            read-only float64 array.
        source_id: optional identifier of the originating submap.
    """

    points: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, source_id=self.source_id)


@dataclass(frozen=True)
class AugmentationConfig:
    """Magnitudes for the four augmentations, applied in the fixed order
    jitter -> point removal -> block removal -> shear.

    A zero magnitude disables its stage in compose_augmentations. All values
    assume clouds normalized to [-1, 1].
    """

    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    point_removal_fraction: float = 0.3
    block_extent: float = 0.4
    shear_max: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValueError("jitter_sigma and jitter_clip must be >= 0")
        if not 0 <= self.point_removal_fraction < 1:
            raise ValueError("point_removal_fraction must be in [0, 1)")
        if self.block_extent < 0:
            raise ValueError("block_extent must be >= 0")
        if self.shear_max < 0:
            raise ValueError("shear_max must be >= 0")

    def rng(self) -> np.random.Generator:
        """Fresh generator seeded from this config (standalone use)."""
        return np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_pointcloud(pc: PointCloud, path: str | Path, binary: bool = True) -> None:
    """Write a cloud to disk.

    Binary layout (canonical): 8-byte magic ``GIDPPC01``, little-endian u32 N,
    then 3*N little-endian float32 values (x, y, z interleaved). Text layout:
    header line ``PCD1 <N>`` followed by N lines of three decimal floats.
    """
    path = Path(path)
    pts = pc.points
    if binary:
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(struct.pack("<I", len(pc)))
            f.write(pts.astype("<f4").tobytes())
    else:
        lines = [f"{TEXT_MAGIC} {len(pc)}"]
        # repr gives the shortest decimal that parses back to the same float64
        lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist())
        path.write_text("\n".join(lines) + "\n")


def load_pointcloud(path: str | Path, source_id: str | None = None) -> PointCloud:
    """Load a cloud from either on-disk format (sniffed from the header)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    raw = path.read_bytes()
    if raw[:8] == BINARY_MAGIC:
        return _load_binary(raw, path, source_id)
    return _load_text(raw, path, source_id)


def _load_binary(raw: bytes, path: Path, source_id: str | None) -> PointCloud:
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    body = raw[12:]
    expected = 12 * n
    if len(body) != expected:
        raise FormatError(
            f"{path}: point count mismatch (header declares {n} points, "
            f"payload holds {len(body) // 12})"
        )
    pts = np.frombuffer(body, dtype="<f4").reshape(n, 3).astype(np.float64)
    if n < 1:
        raise FormatError(f"{path}: empty point cloud")
    if not np.isfinite(pts).all():
        raise FormatError(f"{path}: non-finite coordinates")
    return PointCloud(pts, source_id=source_id)


def _load_text(raw: bytes, path: Path, source_id: str | None) -> PointCloud:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not a recognized point cloud file") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(TEXT_MAGIC + " "):
        raise FormatError(f"{path}: malformed header (expected '{TEXT_MAGIC} <N>')")
    try:
        n = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header (expected '{TEXT_MAGIC} <N>')") from exc
    records = lines[1:]
    if len(records) != n:
        raise FormatError(
            f"{path}: point count mismatch (header declares {n} points, "
            f"file holds {len(records)})"
        )
    try:
        pts = np.array([[float(v) for v in ln.split()] for ln in records], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed point record") from exc
    if pts.size == 0 or pts.shape[1] != 3:
        raise FormatError(f"{path}: each record must hold exactly three floats")
    if not np.isfinite(pts).all():
        raise FormatError(f"{path}: non-finite coordinates")
    return PointCloud(pts, source_id=source_id)


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------

def jitter(pc: PointCloud, sigma: float, clip: float, rng: np.random.Generator) -> PointCloud:
    """Perturb every coordinate with Gaussian(0, sigma^2) noise clamped to [-clip, clip]."""
    if sigma < 0 or clip < 0:
        raise ValueError("sigma and clip must be >= 0")
    noise = np.clip(rng.normal(0.0, sigma, size=pc.points.shape), -clip, clip)
    return pc.with_points(pc.points + noise)


def remove_random_points(pc: PointCloud, fraction: float, rng: np.random.Generator) -> PointCloud:
    """Drop exactly floor(fraction * N) points chosen uniformly without replacement.

    Survivors keep their original relative order.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    n = len(pc)
    k = int(np.floor(fraction * n))
    if n - k < 1:
        raise ValueError("removal would leave zero points")
    if k == 0:
        return pc.with_points(pc.points.copy())
    drop = rng.choice(n, size=k, replace=False)
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return pc.with_points(pc.points[keep])


def remove_random_block(pc: PointCloud, block_extent: float, rng: np.random.Generator) -> PointCloud:
    """Remove all points inside an axis-aligned cube of side block_extent.

    The cube is centered on an existing point sampled uniformly; bounds are
    inclusive. If removal would empty the cloud the input is returned
    unchanged (no-op keeps training loops alive).
    """
    if block_extent < 0:
        raise ValueError("block_extent must be >= 0")
    n = len(pc)
    center = pc.points[rng.integers(n)]
    half = block_extent / 2.0
    inside = np.all(np.abs(pc.points - center) <= half, axis=1)
    if inside.all():
        return pc.with_points(pc.points.copy())
    return pc.with_points(pc.points[~inside])


def shear(pc: PointCloud, shear_max: float, rng: np.random.Generator) -> PointCloud:
    """Multiply every point by a shared matrix I + E, E off-diagonal ~ U[-shear_max, shear_max].

    Off-diagonal entries are drawn in fixed row-major order
    (xy, xz, yx, yz, zx, zy); points are treated as column vectors (p' = M p).
    """
    if shear_max < 0:
        raise ValueError("shear_max must be >= 0")
    off = rng.uniform(-shear_max, shear_max, size=6)
    m = np.eye(3)
    m[0, 1], m[0, 2] = off[0], off[1]
    m[1, 0], m[1, 2] = off[2], off[3]
    m[2, 0], m[2, 1] = off[4], off[5]
    return pc.with_points(pc.points @ m.T)


def compose_augmentations(pc: PointCloud, cfg: AugmentationConfig, rng: np.random.Generator) -> PointCloud:
    """Build a positive sample: jitter -> point removal -> block removal -> shear.

    Stages with zero magnitude are skipped entirely (no rng draws), so an
    all-zero config is the identity.
    """
    out = pc
    if cfg.jitter_sigma > 0:
        out = jitter(out, cfg.jitter_sigma, cfg.jitter_clip, rng)
    if cfg.point_removal_fraction > 0:
        out = remove_random_points(out, cfg.point_removal_fraction, rng)
    if cfg.block_extent > 0:
        out = remove_random_block(out, cfg.block_extent, rng)
    if cfg.shear_max > 0:
        out = shear(out, cfg.shear_max, rng)
    return out
