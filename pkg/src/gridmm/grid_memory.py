"""Append-only grid memory bank and per-step egocentric map construction.

The bank accumulates every observed grid feature together with its
absolute world coordinates; it never shrinks within an episode and
duplicate positions are kept rather than merged.  Rebuilding the map at
a new pose re-expresses all stored points egocentrically, sizes the map
to cover them, and buckets them into N x N cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import DimensionError, EmptyMemoryError
from .geometry import WorldPose


class GridMemoryBank:
    """Ordered store of (feature, absolute point, step) entries."""

    def __init__(self, feature_dim: int) -> None:
        self.feature_dim = feature_dim
        self._features: list[np.ndarray] = []
        self._points: list[tuple[float, float]] = []
        self._steps: list[int] = []
        self._feature_matrix: np.ndarray | None = None
        self._point_matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._features)

    def store_observation(
        self,
        features: np.ndarray,
        points: np.ndarray,
        step: int,
    ) -> None:
        """Append a batch of observed features with their world points."""
        features = np.asarray(features)
        points = np.asarray(points, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise DimensionError(
                f"features must be (n, {self.feature_dim}), got {features.shape}"
            )
        if points.shape != (features.shape[0], 2):
            raise ValueError(
                f"points shape {points.shape} does not match {features.shape[0]} features"
            )
        for i in range(features.shape[0]):
            self._features.append(features[i])
            self._points.append((float(points[i, 0]), float(points[i, 1])))
            self._steps.append(step)
        self._feature_matrix = None
        self._point_matrix = None

    @property
    def features(self) -> np.ndarray:
        if self._feature_matrix is None:
            self._feature_matrix = (
                np.stack(self._features) if self._features else np.empty((0, self.feature_dim))
            )
        return self._feature_matrix

    @property
    def points(self) -> np.ndarray:
        if self._point_matrix is None:
            self._point_matrix = (
                np.array(self._points, dtype=np.float64)
                if self._points
                else np.empty((0, 2), dtype=np.float64)
            )
        return self._point_matrix

    @property
    def steps(self) -> np.ndarray:
        return np.asarray(self._steps, dtype=np.int64)

    def feature(self, entry_id: int) -> np.ndarray:
        return self._features[entry_id]


@dataclass
class CellGeometry:
    """Distance and heading of every cell center relative to the agent."""

    distance: np.ndarray   # (N, N) meters
    sin_phi: np.ndarray    # (N, N)
    cos_phi: np.ndarray    # (N, N)


@dataclass
class GridMapCells:
    """The egocentric bucketing of a bank at one pose."""

    scale: int
    side_length: float
    pose: WorldPose
    rel_points: np.ndarray          # (bank_size, 2) egocentric coordinates
    cell_of_entry: np.ndarray       # (bank_size,) flattened m * N + n
    order: np.ndarray               # entry ids sorted by cell
    boundaries: np.ndarray          # searchsorted cell boundaries into ``order``
    step: int = 0

    def cell_entries(self, m: int, n: int) -> np.ndarray:
        """Entry ids stored in cell (m, n)."""
        key = m * self.scale + n
        lo = self.boundaries[key]
        hi = self.boundaries[key + 1]
        return self.order[lo:hi]

    def populations(self) -> np.ndarray:
        """(N, N) array of per-cell entry counts."""
        return np.diff(self.boundaries).reshape(self.scale, self.scale)

    @property
    def cells(self) -> list[list[list[tuple[int, tuple[float, float]]]]]:
        """Nested N x N lists of (entry id, relative point) pairs."""
        out = []
        for m in range(self.scale):
            row = []
            for n in range(self.scale):
                ids = self.cell_entries(m, n)
                row.append(
                    [(int(i), (float(self.rel_points[i, 0]), float(self.rel_points[i, 1]))) for i in ids]
                )
            out.append(row)
        return out


def build_grid_map(
    bank: GridMemoryBank,
    pose: WorldPose,
    scale: int,
    min_side: float = geometry.DEFAULT_MIN_SIDE_LENGTH,
    step: int = 0,
) -> tuple[GridMapCells, CellGeometry]:
    """Bucket every bank entry into the egocentric N x N map at ``pose``."""
    if len(bank) == 0:
        raise EmptyMemoryError("cannot build a grid map from an empty memory bank")
    rel = geometry.to_relative_array(bank.points, pose)
    length = geometry.side_length(rel, min_side=min_side)
    mn = geometry.cell_indices_array(rel, length, scale)
    keys = mn[:, 0] * scale + mn[:, 1]
    order = np.argsort(keys, kind="stable").astype(np.int64)
    boundaries = np.searchsorted(keys[order], np.arange(scale * scale + 1))
    cells = GridMapCells(
        scale=scale,
        side_length=length,
        pose=pose,
        rel_points=rel,
        cell_of_entry=keys,
        order=order,
        boundaries=boundaries.astype(np.int64),
        step=step,
    )
    centers = geometry.cell_centers(length, scale)
    dist = np.hypot(centers[:, :, 0], centers[:, :, 1])
    phi = np.arctan2(centers[:, :, 1], centers[:, :, 0])
    geom = CellGeometry(distance=dist, sin_phi=np.sin(phi), cos_phi=np.cos(phi))
    return cells, geom


@dataclass
class MapStepStats:
    step: int
    side_length: float
    max_cell_population: int


def map_statistics(maps: list[GridMapCells]) -> list[MapStepStats]:
    """Per-step side length and densest-cell population for an episode."""
    stats = []
    for snapshot in maps:
        pops = snapshot.populations()
        stats.append(
            MapStepStats(
                step=snapshot.step,
                side_length=float(snapshot.side_length),
                max_cell_population=int(pops.max()) if pops.size else 0,
            )
        )
    return stats


def map_snapshot_dict(cells: GridMapCells) -> dict:
    """JSON-ready dump of one map snapshot."""
    return {
        "schema": "gridmm-map-snapshot/1",
        "step": cells.step,
        "pose": {"x": cells.pose.x, "y": cells.pose.y, "heading": cells.pose.heading},
        "N": cells.scale,
        "L": cells.side_length,
        "cells": [
            [
                [
                    {"id": int(i), "x_rel": float(cells.rel_points[i, 0]), "y_rel": float(cells.rel_points[i, 1])}
                    for i in cells.cell_entries(m, n)
                ]
                for n in range(cells.scale)
            ]
            for m in range(cells.scale)
        ],
    }
