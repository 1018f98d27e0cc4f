"""File I/O for every on-disk format the pipeline produces or consumes.

Formats:
- depth / disparity: 16-bit big-endian binary PGM (P5); depth values are
  millimeters, disparity values are 1/16-pixel fixed point, 0 = invalid
- label maps and S-BEV grids: 8-bit binary PGM, value = class ID
- trajectories: CSV with header ``frame_id,t,x,y,theta`` (seconds, meters,
  radians)
- dataset directory: poses.csv + depth/NNNNN.pgm + labels/NNNNN.pgm +
  world.json + manifest.json {"format_version": 1}

Readers reject malformed input instead of guessing.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .geometry import Pose2

FORMAT_VERSION = 1

DEPTH_SCALE = 1000.0      # meters -> stored millimeters
DISPARITY_SCALE = 16.0    # pixels -> stored 1/16 px

DEPTH_INVALID = 0.0
DISPARITY_INVALID = -1.0


# ---------------------------------------------------------------------------
# PGM

def write_pgm(path, grid: np.ndarray, bits: int = 8) -> None:
    """Write a P5 binary PGM; 16-bit payloads are big-endian per the format."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InputError(f"PGM grid must be 2-D, got shape {grid.shape}")
    if bits == 8:
        maxval, dtype = 255, ">u1"
    elif bits == 16:
        maxval, dtype = 65535, ">u2"
    else:
        raise InputError(f"unsupported bit depth {bits}")
    if grid.min() < 0 or grid.max() > maxval:
        raise InputError(f"grid values outside [0, {maxval}]")
    h, w = grid.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by write_pgm (maxval must be 255 or 65535)."""
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def next_token():
        nonlocal pos
        # skip whitespace and '#' comment lines
        while pos < len(data):
            c = data[pos:pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise FormatError("unterminated comment", offset=pos)
                pos = nl + 1
            else:
                break
        if pos >= len(data):
            raise FormatError("truncated header", offset=pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos], start

    magic, off = next_token()
    if magic != b"P5":
        raise FormatError(f"bad magic {magic!r}, expected P5", offset=off)

    dims = []
    for name in ("width", "height", "maxval"):
        tok, off = next_token()
        try:
            dims.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric {name} {tok!r}", offset=off) from None
    width, height, maxval = dims
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}", offset=off)
    if maxval == 255:
        dtype, itemsize = ">u1", 1
    elif maxval == 65535:
        dtype, itemsize = ">u2", 2
    else:
        raise FormatError(f"unsupported maxval {maxval}", offset=off)

    # exactly one whitespace byte separates header and payload
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing header/payload separator", offset=pos)
    pos += 1

    expected = width * height * itemsize
    payload = data[pos:]
    if len(payload) != expected:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {expected}", offset=pos)
    grid = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return grid.astype(np.uint8 if itemsize == 1 else np.uint16)


def write_depth_pgm(path, depth_m: np.ndarray) -> None:
    """Depth in meters -> 16-bit millimeter PGM. 0 stays the invalid sentinel."""
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * DEPTH_SCALE)
    if mm.max(initial=0) > 65535:
        raise InputError("depth exceeds 65.535 m, not representable in 16-bit mm")
    write_pgm(path, mm.astype(np.uint16), bits=16)


def read_depth_pgm(path) -> np.ndarray:
    grid = read_pgm(path)
    if grid.dtype != np.uint16:
        raise FormatError(f"{path}: depth PGM must be 16-bit")
    return grid.astype(np.float64) / DEPTH_SCALE


def write_disparity_pgm(path, disparity_px: np.ndarray) -> None:
    """Disparity in pixels -> 16-bit 1/16-px PGM; invalid (<0) maps to 0."""
    d = np.asarray(disparity_px, dtype=np.float64)
    fixed = np.where(d < 0, 0.0, np.round(d * DISPARITY_SCALE))
    if fixed.max(initial=0) > 65535:
        raise InputError("disparity exceeds 16-bit fixed-point range")
    write_pgm(path, fixed.astype(np.uint16), bits=16)


def read_disparity_pgm(path) -> np.ndarray:
    grid = read_pgm(path)
    if grid.dtype != np.uint16:
        raise FormatError(f"{path}: disparity PGM must be 16-bit")
    d = grid.astype(np.float64) / DISPARITY_SCALE
    d[grid == 0] = DISPARITY_INVALID
    return d


def write_label_pgm(path, labels: np.ndarray) -> None:
    write_pgm(path, np.asarray(labels, dtype=np.uint8), bits=8)


def read_label_pgm(path) -> np.ndarray:
    grid = read_pgm(path)
    if grid.dtype != np.uint8:
        raise FormatError(f"{path}: label PGM must be 8-bit")
    return grid


# ---------------------------------------------------------------------------
# trajectories

TRAJECTORY_HEADER = "frame_id,t,x,y,theta"


@dataclass(frozen=True)
class TrajectorySample:
    frame_id: int
    t: float
    pose: Pose2


def write_trajectory(path, samples) -> None:
    with open(path, "w") as f:
        f.write(TRAJECTORY_HEADER + "\n")
        for s in samples:
            f.write(f"{s.frame_id},{s.t:.9g},{s.pose.x:.9g},{s.pose.y:.9g},{s.pose.theta:.9g}\n")


def read_trajectory(path) -> list[TrajectorySample]:
    """Ordered, validated trajectory. Errors name the offending row."""
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != TRAJECTORY_HEADER:
        raise FormatError(f"{path}: expected header '{TRAJECTORY_HEADER}'")
    out = []
    last_t = -np.inf
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise InputError(f"{path} row {i}: expected 5 fields, got {len(parts)}")
        try:
            frame_id = int(parts[0])
            t, x, y, theta = (float(v) for v in parts[1:])
        except ValueError:
            raise InputError(f"{path} row {i}: non-numeric field") from None
        if not all(np.isfinite(v) for v in (t, x, y, theta)):
            raise InputError(f"{path} row {i}: non-finite value")
        if t < last_t:
            raise InputError(f"{path} row {i}: timestamp {t} decreases")
        last_t = t
        out.append(TrajectorySample(frame_id, t, Pose2(x, y, theta)))
    return out


# ---------------------------------------------------------------------------
# dataset directories

@dataclass(frozen=True)
class FrameRef:
    frame_id: int
    t: float
    pose: Pose2
    depth_path: str
    label_path: str


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    frames: tuple
    remap: dict | None = None

    def __len__(self):
        return len(self.frames)


def write_format_manifest(root) -> None:
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump({"format_version": FORMAT_VERSION}, f)
        f.write("\n")


def check_format_version(root) -> None:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"{path}: missing format manifest")
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")


def frame_name(frame_id: int) -> str:
    return f"{frame_id:05d}.pgm"


def load_dataset(root) -> DatasetManifest:
    """Strict loader for directories produced by this package."""
    check_format_version(root)
    poses = os.path.join(root, "poses.csv")
    if not os.path.exists(poses):
        raise InputError(f"{root}: missing poses.csv")
    samples = read_trajectory(poses)
    frames, missing = [], []
    for s in samples:
        depth = os.path.join(root, "depth", frame_name(s.frame_id))
        label = os.path.join(root, "labels", frame_name(s.frame_id))
        for p in (depth, label):
            if not os.path.exists(p):
                missing.append(p)
        frames.append(FrameRef(s.frame_id, s.t, s.pose, depth, label))
    if missing:
        shown = "\n  ".join(missing[:10])
        raise InputError(f"{root}: {len(missing)} missing frame files:\n  {shown}")
    return DatasetManifest(root=str(root), frames=tuple(frames))


def import_vkitti_like(root, remap: dict | None = None) -> DatasetManifest:
    """Adapter for external per-frame depth/label directories.

    Expects root/depth/*.pgm, root/labels/*.pgm (sorted name order defines the
    frame sequence) and root/poses.csv. Frame count is the minimum of the
    three sources; a mismatch only warns. ``remap`` is an optional class-ID
    translation applied when frames are loaded.
    """
    poses = os.path.join(root, "poses.csv")
    if not os.path.exists(poses):
        raise InputError(f"{root}: missing pose file poses.csv")
    samples = read_trajectory(poses)

    def listing(sub):
        d = os.path.join(root, sub)
        if not os.path.isdir(d):
            raise InputError(f"{root}: missing directory {sub}/")
        return sorted(os.path.join(d, n) for n in os.listdir(d) if n.endswith(".pgm"))

    depths = listing("depth")
    labels = listing("labels")
    counts = {"poses": len(samples), "depth": len(depths), "labels": len(labels)}
    n = min(counts.values())
    if n == 0:
        raise InputError(f"{root}: empty dataset ({counts})")
    if len(set(counts.values())) > 1:
        warnings.warn(f"{root}: frame count mismatch {counts}, using {n}")

    frames = tuple(
        FrameRef(i, samples[i].t, samples[i].pose, depths[i], labels[i])
        for i in range(n)
    )
    return DatasetManifest(root=str(root), frames=frames,
                           remap=dict(remap) if remap else None)


def load_frame(manifest: DatasetManifest, index: int):
    """Return (depth_m, labels) for one frame, applying the manifest remap."""
    ref = manifest.frames[index]
    depth = read_depth_pgm(ref.depth_path)
    labels = read_label_pgm(ref.label_path)
    if manifest.remap:
        lut = np.arange(256, dtype=np.uint8)
        for src, dst in manifest.remap.items():
            lut[int(src)] = int(dst)
        labels = lut[labels]
    return depth, labels
