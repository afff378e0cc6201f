"""Point-cloud primitives: centroids, AABBs, transforms, containment, sampling.

Conventions: Z is the vertical ("up") axis. All computation is done in
double precision; serialized point data is rounded to 32-bit floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (empty clouds, bad labels, ...)."""


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray  # (3,)
    max: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64))
        if np.any(self.min > self.max):
            raise GeometryError("Aabb min exceeds max")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)


@dataclass
class PointCloud:
    """Points (n, 3) float64 with optional per-point integer part labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud contains non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise GeometryError(
                    "label count %d != point count %d"
                    % (self.labels.shape[0], self.points.shape[0])
                )

    def __len__(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "PointCloud":
        labels = None if self.labels is None else self.labels.copy()
        return PointCloud(self.points.copy(), labels)


def _require_nonempty(cloud: PointCloud, op: str) -> None:
    if len(cloud) == 0:
        raise GeometryError(f"{op}: empty point cloud")


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of the points."""
    _require_nonempty(cloud, "centroid")
    return cloud.points.mean(axis=0)


def aabb(cloud: PointCloud) -> Aabb:
    """Componentwise min/max bounding box."""
    _require_nonempty(cloud, "aabb")
    return Aabb(cloud.points.min(axis=0), cloud.points.max(axis=0))


def axis_gap(a: Aabb, b: Aabb, axis) -> float:
    """Signed face-to-face distance between two boxes along an axis.

    Negative means the boxes overlap on that axis; symmetric in (a, b).
    """
    k = AXES[axis] if isinstance(axis, str) else int(axis)
    return float(max(a.min[k] - b.max[k], b.min[k] - a.max[k]))


def containment_fraction(base: PointCloud, cover: Aabb) -> float:
    """Fraction of base points whose (x, y) lies in cover's XY rectangle.

    Bounds are closed: points exactly on the boundary count as inside.
    """
    _require_nonempty(base, "containment_fraction")
    xy = base.points[:, :2]
    inside = np.all((xy >= cover.min[:2]) & (xy <= cover.max[:2]), axis=1)
    return float(inside.mean())


def translate(cloud: PointCloud, t) -> PointCloud:
    """Exact affine translation by vector t."""
    t = np.asarray(t, dtype=np.float64).reshape(3)
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(cloud.points + t, labels)


def scale_xy_about_origin(cloud: PointCloud, s: float) -> PointCloud:
    """Uniform scaling of x and y about the origin; z untouched.

    s == 1.0 is a bit-exact identity.
    """
    pts = cloud.points.copy()
    pts[:, 0] *= s
    pts[:, 1] *= s
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(pts, labels)


def downsample(cloud: PointCloud, n_target: int, rng: np.random.Generator) -> PointCloud:
    """Resample to exactly n_target points.

    Uniform without replacement when the cloud is large enough, with
    replacement otherwise. Labels are carried alongside the points.
    """
    _require_nonempty(cloud, "downsample")
    if n_target < 1:
        raise GeometryError("downsample: n_target must be >= 1")
    n = len(cloud)
    idx = rng.choice(n, size=n_target, replace=n < n_target)
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(cloud.points[idx], labels)


def _fmt32(v: float) -> str:
    # shortest decimal string that round-trips through float32
    return np.format_float_positional(np.float32(v), unique=True, trim="0")


def save_xyz(cloud: PointCloud, path) -> None:
    """Write ASCII "x y z [label]" lines; float32 round-trip exact."""
    path = Path(path)
    lines = []
    for i, p in enumerate(cloud.points):
        row = f"{_fmt32(p[0])} {_fmt32(p[1])} {_fmt32(p[2])}"
        if cloud.labels is not None:
            row += f" {int(cloud.labels[i])}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_xyz(path) -> PointCloud:
    """Read the ASCII point format; '#' starts a comment."""
    pts: list[list[float]] = []
    labels: list[int] = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise GeometryError(f"{path}: bad line {raw!r}")
        pts.append([float(fields[0]), float(fields[1]), float(fields[2])])
        if len(fields) == 4:
            labels.append(int(fields[3]))
    if labels and len(labels) != len(pts):
        raise GeometryError(f"{path}: labels present on only some lines")
    # snap to the float32 grid the writer used, then widen
    points = np.asarray(pts, dtype=np.float32).astype(np.float64).reshape(-1, 3)
    return PointCloud(points, np.asarray(labels) if labels else None)
