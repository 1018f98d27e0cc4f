"""Semantic bird's-eye-view construction.

A frame's depth map and class-ID label map are unprojected into a labeled
3D point cloud, re-expressed in the ego frame (x forward, y left, z up, origin
at the camera), and rasterized top-down into a square class-ID grid. Up to
five consecutive frames are motion-compensated into one accumulated grid.

Grid layout: the ego sits at the bottom-center cell looking "up" the image.
Row index decreases with forward distance x in [0, size*resolution); column
index decreases with leftward offset y in [-extent/2, +extent/2).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import datasets
from .errors import InputError
from .geometry import (
    Intrinsics,
    PointCloud,
    Pose2,
    Pose3,
    pose3_compose,
    pose3_inverse,
    transform_points,
)

DEFAULT_SIZE = 352


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the rasterization grid."""

    size: int = DEFAULT_SIZE
    resolution: float = 0.25           # meters per cell
    height_window: tuple = (-2.5, 6.0)  # z band kept, relative to the camera
    stride: int = 2                    # pixel lattice step for cloud building

    def __post_init__(self):
        if self.size <= 0 or self.resolution <= 0:
            raise InputError("grid size and resolution must be positive")
        if self.height_window[0] >= self.height_window[1]:
            raise InputError("height window must satisfy z_min < z_max")
        if self.stride < 1:
            raise InputError("stride must be >= 1")

    @property
    def forward_extent(self) -> float:
        return self.size * self.resolution

    @property
    def lateral_extent(self) -> float:
        return self.size * self.resolution


@dataclass(frozen=True)
class ClassPolicy:
    """Which class IDs survive into the S-BEV, and an optional re-labeling."""

    keep_set: frozenset
    remap: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "keep_set", frozenset(int(c) for c in self.keep_set))
        for c in self.keep_set:
            if not 0 < c <= 255:
                raise InputError(f"class ID {c} outside 1..255")


@dataclass(frozen=True)
class SBev:
    """Class-ID grid plus the metadata needed to reuse it downstream."""

    grid: np.ndarray               # (size, size) uint8, 0 = empty
    resolution: float
    origin: Pose2 = field(default_factory=lambda: Pose2(0, 0, 0))
    frame_id: int = 0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.uint8)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise InputError(f"S-BEV grid must be square, got {g.shape}")
        if self.resolution <= 0:
            raise InputError("resolution must be positive")
        object.__setattr__(self, "grid", g)


def filter_labels(labels: np.ndarray, policy: ClassPolicy) -> np.ndarray:
    """Zero out IDs outside keep_set, then apply the remap table."""
    lut = np.zeros(256, dtype=np.uint8)
    for c in policy.keep_set:
        lut[c] = c
    if policy.remap:
        for src, dst in policy.remap.items():
            if lut[int(src)]:
                lut[int(src)] = int(dst)
    return lut[np.asarray(labels, dtype=np.uint8)]


def build_point_cloud(depth: np.ndarray, labels: np.ndarray, k: Intrinsics,
                      stride: int = 2) -> PointCloud:
    """Unproject every valid-depth, labeled pixel on the stride lattice.

    Returned points are in the camera optical frame (X right, Y down,
    Z forward).
    """
    depth = np.asarray(depth, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.uint8)
    if depth.shape != labels.shape:
        raise InputError(f"depth {depth.shape} vs labels {labels.shape}")
    d = depth[::stride, ::stride]
    l = labels[::stride, ::stride]
    vs, us = np.nonzero((d > 0) & (l != 0))
    dv = d[vs, us]
    u = us * stride
    v = vs * stride
    xyz = np.stack([(u - k.cx) * dv / k.fx,
                    (v - k.cy) * dv / k.fy,
                    dv], axis=1)
    return PointCloud(xyz, l[vs, us])


def cell_indices(spec: GridSpec, x: np.ndarray, y: np.ndarray):
    """Metric ego coordinates -> (row, col, inside_mask)."""
    half = spec.lateral_extent / 2.0
    xi = np.floor(np.asarray(x) / spec.resolution).astype(np.int64)
    yi = np.floor((np.asarray(y) + half) / spec.resolution).astype(np.int64)
    rows = spec.size - 1 - xi
    cols = spec.size - 1 - yi
    inside = (xi >= 0) & (xi < spec.size) & (yi >= 0) & (yi < spec.size)
    return rows, cols, inside


def cell_centers(spec: GridSpec):
    """Metric (x, y) of each cell center, as per-row and per-col vectors."""
    idx = np.arange(spec.size)
    x = (spec.size - 0.5 - idx) * spec.resolution          # by row
    y = (spec.size - 0.5 - idx) * spec.resolution - spec.lateral_extent / 2.0  # by col
    return x, y


def rasterize_bev(cloud: PointCloud, spec: GridSpec,
                  origin: Pose2 = Pose2(0, 0, 0), frame_id: int = 0) -> SBev:
    """Top-down projection: per cell, keep the label of the highest point.

    Ties on height break toward the larger label ID, so the result is
    independent of point order.
    """
    grid = np.zeros((spec.size, spec.size), dtype=np.uint8)
    if len(cloud):
        x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
        zmin, zmax = spec.height_window
        rows, cols, inside = cell_indices(spec, x, y)
        keep = inside & (z >= zmin) & (z <= zmax) & (cloud.labels != 0)
        rows, cols = rows[keep], cols[keep]
        z, labels = z[keep], cloud.labels[keep]
        if len(rows):
            order = np.lexsort((labels, z, rows * spec.size + cols))
            grid[rows[order], cols[order]] = labels[order]
    return SBev(grid, spec.resolution, origin, frame_id)


def accumulate_sbev(frames, current_pose: Pose3, spec: GridSpec,
                    origin: Pose2 = Pose2(0, 0, 0), frame_id: int = 0) -> SBev:
    """Merge up to five (ego-frame cloud, ego Pose3) pairs, newest last.

    Every cloud is moved into the newest frame's ego coordinates before a
    single rasterization pass.
    """
    if not 1 <= len(frames) <= 5:
        raise InputError(f"need 1..5 frames, got {len(frames)}")
    inv_cur = pose3_inverse(current_pose)
    parts_xyz, parts_labels = [], []
    for cloud, pose in frames:
        rel = pose3_compose(inv_cur, pose)
        moved = transform_points(cloud, rel)
        parts_xyz.append(moved.xyz)
        parts_labels.append(moved.labels)
    merged = PointCloud(np.concatenate(parts_xyz), np.concatenate(parts_labels))
    return rasterize_bev(merged, spec, origin=origin, frame_id=frame_id)


# ---------------------------------------------------------------------------
# S-BEV files: 8-bit PGM + JSON sidecar

def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def write_sbev(path, sbev: SBev) -> None:
    datasets.write_pgm(path, sbev.grid, bits=8)
    record = {
        "frame_id": sbev.frame_id,
        "origin": {"x": sbev.origin.x, "y": sbev.origin.y, "theta": sbev.origin.theta},
        "resolution": sbev.resolution,
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(record, f)
        f.write("\n")


def read_sbev(path) -> SBev:
    grid = datasets.read_pgm(path)
    with open(sidecar_path(path)) as f:
        rec = json.load(f)
    origin = Pose2(rec["origin"]["x"], rec["origin"]["y"], rec["origin"]["theta"])
    return SBev(grid, rec["resolution"], origin, int(rec["frame_id"]))
