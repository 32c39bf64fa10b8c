"""Core point-cloud data types, file I/O and geometric preprocessing.

Coordinates are meters throughout. Clouds are immutable by convention:
every operation returns a new LabeledCloud and never mutates its input.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

# Semantic class codes. 0 is reserved for points without a meaningful class.
UNLABELED = 0
FLOOR = 1
WALL = 2
ROBOT = 3
HUMAN = 4
AGV = 5
ASSEMBLY_LINE = 6
TABLE = 7

CLASS_NAMES = {
    UNLABELED: "Unlabeled",
    FLOOR: "Floor",
    WALL: "Wall",
    ROBOT: "Robot",
    HUMAN: "Human",
    AGV: "AGV",
    ASSEMBLY_LINE: "AssemblyLine",
    TABLE: "Table",
}
NUM_CLASSES = 8

# Immobile fixtures vs things that move around the shop floor.
STATIC_CLASSES = frozenset({FLOOR, WALL, ASSEMBLY_LINE, TABLE})
DYNAMIC_CLASSES = frozenset({ROBOT, HUMAN, AGV})

PCSB_MAGIC = b"PCSB"
PCSB_VERSION = 1
_FLAG_LABELS = 0x1


class CloudFormatError(ValueError):
    """File does not match the PCSB/PCST format."""


class CloudValidationError(ValueError):
    """Cloud contents violate an invariant (bad label, non-finite point)."""


@dataclass(frozen=True)
class LabeledCloud:
    """N x 3 points with optional per-point class labels."""

    points: np.ndarray
    labels: np.ndarray | None = None
    frame_id: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not np.isfinite(pts).all():
            raise CloudValidationError("non-finite coordinate in cloud")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise CloudValidationError(
                    f"label count {lab.shape[0]} != point count {pts.shape[0]}")
            if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
                raise CloudValidationError("label code outside [0, 8)")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def with_points(self, points: np.ndarray) -> "LabeledCloud":
        return LabeledCloud(points, self.labels, self.frame_id)

    def take(self, idx: np.ndarray) -> "LabeledCloud":
        lab = self.labels[idx] if self.labels is not None else None
        return LabeledCloud(self.points[idx], lab, self.frame_id)

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise CloudValidationError("cloud has no labels")
        return np.bincount(self.labels, minlength=NUM_CLASSES)


@dataclass(frozen=True)
class NormalizationRecord:
    """Centroid/scale pair so that (x - centroid) / scale is the normalized frame."""

    centroid: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


@dataclass(frozen=True)
class DecimationPolicy:
    """Class-aware decimation rates: keep 1-in-rate points per class."""

    static_rate: int = 10
    dynamic_rate: int = 2
    static_classes: frozenset = STATIC_CLASSES
    dynamic_classes: frozenset = DYNAMIC_CLASSES
    point_budget: int = 11000

    def __post_init__(self):
        if self.static_rate < 1 or self.dynamic_rate < 1:
            raise ValueError("decimation rates must be positive")
        if self.static_classes & self.dynamic_classes:
            raise ValueError("static and dynamic class sets overlap")
        covered = set(self.static_classes) | set(self.dynamic_classes) | {UNLABELED}
        if covered != set(range(NUM_CLASSES)):
            raise ValueError("class sets must cover all 8 codes")

    def rate_for(self, class_id: int) -> int:
        # Unlabeled background is treated like static structure.
        if class_id in self.dynamic_classes:
            return self.dynamic_rate
        return self.static_rate


def load_cloud(path) -> LabeledCloud:
    """Load a PCSB (binary) or PCST (ascii) cloud, sniffing by magic bytes."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head == PCSB_MAGIC:
            return _load_pcsb(f)
    return _load_pcst(path)


def loads_pcsb(data: bytes) -> LabeledCloud:
    """Parse an in-memory PCSB payload."""
    import io

    buf = io.BytesIO(data)
    if buf.read(4) != PCSB_MAGIC:
        raise CloudFormatError("bad PCSB magic")
    return _load_pcsb(buf)


def dumps_pcsb(cloud: LabeledCloud) -> bytes:
    """Serialize a cloud to an in-memory PCSB payload."""
    flags = _FLAG_LABELS if cloud.has_labels else 0
    n = len(cloud)
    pts32 = cloud.points.astype("<f4")
    head = PCSB_MAGIC + struct.pack("<HHI", PCSB_VERSION, flags, n)
    if cloud.has_labels:
        rec = np.empty((n, 13), dtype=np.uint8)
        rec[:, :12] = pts32.view(np.uint8).reshape(n, 12)
        rec[:, 12] = cloud.labels.astype(np.uint8)
        return head + rec.tobytes()
    return head + pts32.tobytes()


def _load_pcsb(f) -> LabeledCloud:
    hdr = f.read(8)
    if len(hdr) != 8:
        raise CloudFormatError("truncated PCSB header")
    version, flags, n = struct.unpack("<HHI", hdr)
    if version != PCSB_VERSION:
        raise CloudFormatError(f"unsupported PCSB version {version}")
    has_labels = bool(flags & _FLAG_LABELS)
    rec = 13 if has_labels else 12
    payload = f.read(rec * n)
    if len(payload) != rec * n:
        raise CloudFormatError("truncated PCSB payload")
    if has_labels:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, rec)
        pts = raw[:, :12].copy().view("<f4").reshape(n, 3)
        lab = raw[:, 12].astype(np.int64)
        if lab.size and lab.max() >= NUM_CLASSES:
            raise CloudValidationError("label code outside [0, 8)")
    else:
        pts = np.frombuffer(payload, dtype="<f4").reshape(n, 3)
        lab = None
    return LabeledCloud(pts.astype(np.float64), lab)


def _load_pcst(path) -> LabeledCloud:
    pts, labs = [], []
    with open(path, "r") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise CloudFormatError(f"bad PCST line: {line!r}")
            pts.append([float(v) for v in parts[:3]])
            labs.append(int(parts[3]) if len(parts) == 4 else -1)
    if pts and labs and all(l >= 0 for l in labs):
        labels = np.array(labs, dtype=np.int64)
    elif any(l >= 0 for l in labs):
        raise CloudFormatError("mixed labeled/unlabeled PCST lines")
    else:
        labels = None
    points = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return LabeledCloud(points, labels)


def save_cloud(cloud: LabeledCloud, path, format: str = "binary") -> None:
    """Write a cloud as PCSB ('binary') or PCST ('ascii')."""
    if format == "binary":
        with open(path, "wb") as f:
            f.write(dumps_pcsb(cloud))
    elif format == "ascii":
        with open(path, "w") as f:
            for i in range(len(cloud)):
                x, y, z = cloud.points[i]
                if cloud.has_labels:
                    f.write(f"{x:.9g} {y:.9g} {z:.9g} {cloud.labels[i]}\n")
                else:
                    f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    else:
        raise ValueError(f"unknown format {format!r}")


def zero_center_normalize(cloud: LabeledCloud) -> tuple[LabeledCloud, NormalizationRecord]:
    """Shift to zero centroid and scale so the farthest point sits on the unit sphere."""
    if len(cloud) == 0:
        raise CloudValidationError("cannot normalize an empty cloud")
    centroid = cloud.points.mean(axis=0)
    shifted = cloud.points - centroid
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    rec = NormalizationRecord(centroid=centroid, scale=scale)
    return cloud.with_points(shifted / scale), rec


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates, floor(p / voxel_size) per axis."""
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_downsample(cloud: LabeledCloud, voxel_size: float) -> LabeledCloud:
    """One point per occupied voxel at the voxel centroid; majority label, ties low."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel_size)
    # Sort voxels lexicographically so output order is deterministic.
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    nvox = uniq.shape[0]
    sums = np.zeros((nvox, 3))
    np.add.at(sums, inv, cloud.points)
    counts = np.bincount(inv, minlength=nvox)
    centroids = sums / counts[:, None]
    labels = None
    if cloud.has_labels:
        votes = np.zeros((nvox, NUM_CLASSES), dtype=np.int64)
        np.add.at(votes, (inv, cloud.labels), 1)
        labels = votes.argmax(axis=1)  # argmax ties resolve to lowest id
    return LabeledCloud(centroids, labels, cloud.frame_id)


def class_aware_decimate(cloud: LabeledCloud, policy: DecimationPolicy,
                         rng_seed: int) -> LabeledCloud:
    """Keep ceil(count/rate) uniformly chosen points per class; seeded."""
    if not cloud.has_labels:
        raise CloudValidationError("class_aware_decimate requires labels")
    rng = np.random.default_rng(rng_seed)
    keep = []
    for c in range(NUM_CLASSES):
        idx = np.flatnonzero(cloud.labels == c)
        if idx.size == 0:
            continue
        n_keep = math.ceil(idx.size / policy.rate_for(c))
        keep.append(rng.choice(idx, size=n_keep, replace=False))
    order = np.sort(np.concatenate(keep))
    return cloud.take(order)


def resample_to_budget(cloud: LabeledCloud, budget: int, rng_seed: int) -> LabeledCloud:
    """Return exactly `budget` points: subsample if over, pad with replacement if under."""
    if len(cloud) == 0:
        raise CloudValidationError("cannot resample an empty cloud")
    if budget < 1:
        raise ValueError("budget must be positive")
    rng = np.random.default_rng(rng_seed)
    n = len(cloud)
    if n >= budget:
        idx = rng.choice(n, size=budget, replace=False)
    else:
        extra = rng.integers(0, n, size=budget - n)
        idx = np.concatenate([np.arange(n), extra])
    return cloud.take(idx)


def merge_clouds(a: LabeledCloud, b: LabeledCloud) -> LabeledCloud:
    """Concatenate two clouds already expressed in a common world frame."""
    points = np.concatenate([a.points, b.points], axis=0)
    if a.has_labels and b.has_labels:
        labels = np.concatenate([a.labels, b.labels])
    else:
        if a.has_labels or b.has_labels:
            warnings.warn("merging labeled with unlabeled cloud drops labels",
                          stacklevel=2)
        labels = None
    return LabeledCloud(points, labels, a.frame_id or b.frame_id)
