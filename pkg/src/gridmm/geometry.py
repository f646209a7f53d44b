"""Planar coordinate math for egocentric grid mapping.

Conventions used throughout the package:

* World frame: metric x/y plane, headings in radians measured
  counterclockwise from the +x axis, normalized to (-pi, pi].
* Egocentric frame of a pose: the agent sits at the origin and the
  +x_rel axis points along the agent's heading, +y_rel to the agent's
  left.  The transform is the rigid rotation-plus-translation

      x_rel = (x - X) * cos(H) + (y - Y) * sin(H)
      y_rel = (y - Y) * cos(H) - (x - X) * sin(H)

* Grid cells: an N x N square map of side length L centered on the
  agent.  Column index n grows with x_rel, row index m grows as y_rel
  decreases, and points exactly on the +L/2 boundary clamp inward.

All geometry runs in 64-bit floats regardless of the learned model's
dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, EmptyMemoryError, OutOfBoundsError

TWO_PI = 2.0 * math.pi

#: substitute side length when every stored point sits at the origin
DEFAULT_MIN_SIDE_LENGTH = 0.5


def normalize_heading(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class WorldPose:
    """Agent position and heading in the world frame."""

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))


@dataclass(frozen=True)
class AbsolutePoint:
    x: float
    y: float


@dataclass(frozen=True)
class RelativePoint:
    x_rel: float
    y_rel: float


@dataclass(frozen=True)
class RayObservation:
    """A single viewing ray: heading relative to the agent's orientation,
    horizontal (line) distance to the observed surface, and the ray's
    elevation angle."""

    heading_angle: float
    line_distance: float
    elevation: float = 0.0

    def __post_init__(self) -> None:
        if self.line_distance < 0.0:
            raise DomainError(f"line_distance must be >= 0, got {self.line_distance}")


@dataclass(frozen=True)
class CellIndex:
    m: int
    n: int


def line_distance_from_depth(depth: float, elevation: float) -> float:
    """Horizontal component of a viewing ray of the given slant depth."""
    if depth < 0.0:
        raise DomainError(f"depth must be >= 0, got {depth}")
    if not abs(elevation) < math.pi / 2:
        raise DomainError(f"|elevation| must be < pi/2, got {elevation}")
    return depth * math.cos(elevation)


def project_to_world(pose: WorldPose, ray: RayObservation) -> AbsolutePoint:
    """World coordinates of the point a ray hits.

    The ray's heading is relative to the agent's orientation, so the
    world-frame ray angle is ``pose.heading + ray.heading_angle``.
    """
    theta = pose.heading + ray.heading_angle
    return AbsolutePoint(
        pose.x + ray.line_distance * math.cos(theta),
        pose.y + ray.line_distance * math.sin(theta),
    )


def to_relative(p: AbsolutePoint, pose: WorldPose) -> RelativePoint:
    """Express a world point in the pose's egocentric frame."""
    dx = p.x - pose.x
    dy = p.y - pose.y
    c = math.cos(pose.heading)
    s = math.sin(pose.heading)
    return RelativePoint(dx * c + dy * s, dy * c - dx * s)


def from_relative(p: RelativePoint, pose: WorldPose) -> AbsolutePoint:
    """Inverse of :func:`to_relative`."""
    c = math.cos(pose.heading)
    s = math.sin(pose.heading)
    return AbsolutePoint(
        pose.x + p.x_rel * c - p.y_rel * s,
        pose.y + p.x_rel * s + p.y_rel * c,
    )


def to_relative_array(points: np.ndarray, pose: WorldPose) -> np.ndarray:
    """Vectorized :func:`to_relative` for an (n, 2) array of world points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"expected an (n, 2) array, got shape {pts.shape}")
    dx = pts[:, 0] - pose.x
    dy = pts[:, 1] - pose.y
    c = math.cos(pose.heading)
    s = math.sin(pose.heading)
    return np.stack([dx * c + dy * s, dy * c - dx * s], axis=1)


def from_relative_array(points: np.ndarray, pose: WorldPose) -> np.ndarray:
    """Vectorized :func:`from_relative` for an (n, 2) array."""
    pts = np.asarray(points, dtype=np.float64)
    c = math.cos(pose.heading)
    s = math.sin(pose.heading)
    return np.stack(
        [
            pose.x + pts[:, 0] * c - pts[:, 1] * s,
            pose.y + pts[:, 0] * s + pts[:, 1] * c,
        ],
        axis=1,
    )


def _as_rel_array(points: Iterable[RelativePoint] | np.ndarray) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=np.float64).reshape(-1, 2)
    seq: Sequence[RelativePoint] = list(points)  # type: ignore[arg-type]
    if not seq:
        return np.empty((0, 2), dtype=np.float64)
    return np.array([[p.x_rel, p.y_rel] for p in seq], dtype=np.float64)


def side_length(
    points: Iterable[RelativePoint] | np.ndarray,
    min_side: float = DEFAULT_MIN_SIDE_LENGTH,
) -> float:
    """Side length of the square map covering all egocentric points.

    Twice the largest absolute coordinate along either axis; a
    degenerate all-at-origin collection falls back to ``min_side``.
    """
    rel = _as_rel_array(points)
    if rel.shape[0] == 0:
        raise EmptyMemoryError("side_length requires at least one point")
    extent = 2.0 * float(np.abs(rel).max())
    return extent if extent > 0.0 else float(min_side)


def cell_index(p: RelativePoint, length: float, scale: int) -> CellIndex:
    """Bucket an egocentric point into the N x N map of side ``length``."""
    if length <= 0.0:
        raise DomainError(f"side length must be > 0, got {length}")
    if scale < 1:
        raise DomainError(f"map scale must be >= 1, got {scale}")
    half = length / 2.0
    if abs(p.x_rel) > half or abs(p.y_rel) > half:
        raise OutOfBoundsError(
            f"point ({p.x_rel}, {p.y_rel}) outside map of side length {length}"
        )
    n = int((p.x_rel + half) * scale / length)
    m = int((half - p.y_rel) * scale / length)
    return CellIndex(m=min(max(m, 0), scale - 1), n=min(max(n, 0), scale - 1))


def cell_indices_array(rel: np.ndarray, length: float, scale: int) -> np.ndarray:
    """Vectorized :func:`cell_index`; returns an (n, 2) int array of (m, n).

    Uses the same arithmetic expression as the scalar version so both
    paths agree bit-for-bit on boundary points.
    """
    if length <= 0.0:
        raise DomainError(f"side length must be > 0, got {length}")
    half = length / 2.0
    xs = rel[:, 0]
    ys = rel[:, 1]
    if np.any(np.abs(xs) > half) or np.any(np.abs(ys) > half):
        bad = int(np.argmax(np.maximum(np.abs(xs), np.abs(ys))))
        raise OutOfBoundsError(
            f"point ({xs[bad]}, {ys[bad]}) outside map of side length {length}"
        )
    n = np.floor((xs + half) * scale / length).astype(np.int64)
    m = np.floor((half - ys) * scale / length).astype(np.int64)
    np.clip(n, 0, scale - 1, out=n)
    np.clip(m, 0, scale - 1, out=m)
    return np.stack([m, n], axis=1)


def cell_centers(length: float, scale: int) -> np.ndarray:
    """Egocentric coordinates of every cell center, shape (N, N, 2)."""
    step = length / scale
    half = length / 2.0
    ns = np.arange(scale, dtype=np.float64)
    xs = (ns + 0.5) * step - half          # column centers along x_rel
    ys = half - (ns + 0.5) * step          # row centers along y_rel
    grid = np.empty((scale, scale, 2), dtype=np.float64)
    grid[:, :, 0] = xs[np.newaxis, :]
    grid[:, :, 1] = ys[:, np.newaxis]
    return grid


def bearing(from_x: float, from_y: float, to_x: float, to_y: float) -> float:
    """World-frame heading of the vector from one point to another."""
    return math.atan2(to_y - from_y, to_x - from_x)
