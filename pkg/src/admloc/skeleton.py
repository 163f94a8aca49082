"""Pose-sequence ingestion, skeleton graph, windowing, and noise injection.

File formats:
  pose CSV       header ``frame,joint,x,y,valid`` — frame-major, joint-minor,
                 0-indexed; ``valid`` is 0/1, invalid joints are interpolated
                 in time on load.
  annotation CSV header ``name,frame``; DSV-style files carry exactly the
                 rows start, m1, m2, m3, end in order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

NUM_JOINTS = 16
NUM_COORDS = 2

# MPII 16-joint order: r_ankle, r_knee, r_hip, l_hip, l_knee, l_ankle,
# pelvis, thorax, upper_neck, head_top, r_wrist, r_elbow, r_shoulder,
# l_shoulder, l_elbow, l_wrist.
MPII_JOINT_NAMES = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
]

MPII_EDGES = [
    (0, 1), (1, 2), (2, 6), (6, 3), (3, 4), (4, 5),
    (6, 7), (7, 8), (8, 9),
    (10, 11), (11, 12), (12, 7), (7, 13), (13, 14), (14, 15),
]

DSV_DEMARCATION_NAMES = ["start", "m1", "m2", "m3", "end"]


class PoseDataError(ValueError):
    """Raised for malformed pose or annotation files and degenerate clips."""


@dataclass(frozen=True)
class DemarcationSet:
    """Named boundary frames within one clip, strictly increasing."""
    labels: tuple[tuple[str, int], ...]

    def __post_init__(self):
        frames = [f for _, f in self.labels]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise PoseDataError("demarcation frames must be strictly increasing")

    @property
    def frames(self) -> list[int]:
        return [f for _, f in self.labels]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.labels]


@dataclass(frozen=True)
class PoseSequence:
    """One clip of 2-D joint trajectories, shape (F, J, C)."""
    frames: np.ndarray
    fps: float
    clip_id: str
    demarcations: DemarcationSet | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise PoseDataError(f"pose array must be (F, J, C), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise PoseDataError("pose array contains non-finite coordinates")
        if self.fps <= 0:
            raise PoseDataError("fps must be positive")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        if self.demarcations is not None:
            last = self.demarcations.frames[-1]
            if last > arr.shape[0] - 1 or self.demarcations.frames[0] < 0:
                raise PoseDataError("demarcation frame outside clip")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SkeletonGraph:
    """Undirected joint graph with a symmetric 0/1 adjacency matrix."""
    num_joints: int
    adjacency: np.ndarray
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.shape != (self.num_joints, self.num_joints):
            raise PoseDataError("adjacency shape mismatch")
        if not np.array_equal(a, a.T):
            raise PoseDataError("adjacency must be symmetric")
        if np.trace(a) != 0:
            raise PoseDataError("adjacency diagonal must be zero")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass
class WindowBatch:
    """Stacked rolling windows, shape (B, W, J, C), with per-window origins."""
    windows: np.ndarray
    origins: list[tuple[str, int]]
    window_size: int

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 4 or self.windows.shape[1] != self.window_size:
            raise PoseDataError(f"window batch must be (B, W, J, C) with W="
                                f"{self.window_size}, got {self.windows.shape}")
        if len(self.origins) != self.windows.shape[0]:
            raise PoseDataError("origin list length must equal batch size")

    @property
    def batch_size(self) -> int:
        return self.windows.shape[0]


def build_mpii_skeleton() -> SkeletonGraph:
    """The fixed 16-joint MPII skeleton (15 limb/torso/head edges)."""
    a = np.zeros((NUM_JOINTS, NUM_JOINTS))
    for i, j in MPII_EDGES:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return SkeletonGraph(NUM_JOINTS, a, tuple(MPII_EDGES))


def _interpolate_invalid(coords: np.ndarray, valid: np.ndarray,
                         clip_id: str) -> np.ndarray:
    """Fill invalid (joint, frame) samples by linear interpolation in time."""
    out = coords.copy()
    F = coords.shape[0]
    t = np.arange(F)
    for j in range(coords.shape[1]):
        mask = valid[:, j]
        if mask.all():
            continue
        if not mask.any():
            raise PoseDataError(
                f"{clip_id}: joint {j} invalid for the entire clip")
        for c in range(coords.shape[2]):
            out[~mask, j, c] = np.interp(t[~mask], t[mask], coords[mask, j, c])
    return out


def load_pose_file(path: str | Path, format: str = "generic-keypoints",
                   annotation_path: str | Path | None = None,
                   fps: float = 60.0, num_joints: int = NUM_JOINTS,
                   clip_id: str | None = None) -> PoseSequence:
    """Load a canonical pose CSV, optionally with a companion annotation CSV.

    format "dsv-annotation" requires an annotation file with exactly the five
    DSV demarcations; "generic-keypoints" accepts any annotation rows or none.
    """
    path = Path(path)
    if format not in ("dsv-annotation", "generic-keypoints"):
        raise PoseDataError(f"unknown pose file format: {format!r}")
    if clip_id is None:
        clip_id = path.stem
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "joint", "x", "y", "valid"]:
            raise PoseDataError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row[0]), int(row[1]),
                             float(row[2]), float(row[3]), int(row[4])))
            except (ValueError, IndexError) as exc:
                raise PoseDataError(f"{path}:{lineno}: unparseable row {row}") from exc
    if not rows:
        raise PoseDataError(f"{path}: empty pose file")
    num_frames = rows[-1][0] + 1
    if len(rows) != num_frames * num_joints:
        raise PoseDataError(
            f"{path}: joint-count mismatch, expected {num_joints} joints "
            f"x {num_frames} frames, got {len(rows)} rows")
    coords = np.zeros((num_frames, num_joints, NUM_COORDS))
    valid = np.zeros((num_frames, num_joints), dtype=bool)
    for idx, (f, j, x, y, v) in enumerate(rows):
        if (f, j) != divmod(idx, num_joints):
            raise PoseDataError(f"{path}: row order broken at frame {f}, joint {j}")
        if v and not (np.isfinite(x) and np.isfinite(y)):
            raise PoseDataError(f"{path}: non-finite coordinate at frame {f}, joint {j}")
        coords[f, j] = (x, y)
        valid[f, j] = bool(v)
    coords = _interpolate_invalid(coords, valid, clip_id)

    demarcations = None
    if annotation_path is not None:
        demarcations = load_annotation_file(annotation_path, dsv=(format == "dsv-annotation"))
    elif format == "dsv-annotation":
        raise PoseDataError("dsv-annotation format requires an annotation file")
    return PoseSequence(coords, fps=fps, clip_id=clip_id, demarcations=demarcations)


def load_annotation_file(path: str | Path, dsv: bool = False) -> DemarcationSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "frame"]:
            raise PoseDataError(f"{path}: bad annotation header {header}")
        labels = [(row[0], int(row[1])) for row in reader]
    if dsv:
        names = [n for n, _ in labels]
        if names != DSV_DEMARCATION_NAMES:
            raise PoseDataError(
                f"{path}: DSV annotations must be exactly {DSV_DEMARCATION_NAMES}, "
                f"got {names}")
    return DemarcationSet(tuple(labels))


def save_pose_file(seq: PoseSequence, path: str | Path,
                   annotation_path: str | Path | None = None) -> None:
    """Write the canonical pose CSV (bit-exact round trip via repr floats)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "joint", "x", "y", "valid"])
        for f in range(seq.num_frames):
            for j in range(seq.num_joints):
                x, y = seq.frames[f, j]
                writer.writerow([f, j, repr(float(x)), repr(float(y)), 1])
    if annotation_path is not None and seq.demarcations is not None:
        with open(annotation_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "frame"])
            for name, frame in seq.demarcations.labels:
                writer.writerow([name, frame])


def normalize_poses(seq: PoseSequence) -> PoseSequence:
    """Center on the per-clip centroid and scale to unit RMS joint radius."""
    coords = seq.frames
    centroid = coords.reshape(-1, coords.shape[-1]).mean(axis=0)
    centered = coords - centroid
    rms = np.sqrt((centered ** 2).sum(axis=-1).mean())
    if rms < 1e-12:
        raise PoseDataError(f"{seq.clip_id}: zero spatial extent")
    return replace(seq, frames=centered / rms)


def partition_windows(seq: PoseSequence, window_size: int,
                      stride: int = 1) -> WindowBatch:
    """Rolling windows over the clip; stride 1 yields F - W + 1 windows."""
    if stride < 1:
        raise PoseDataError("stride must be positive")
    F = seq.num_frames
    if F < window_size:
        raise PoseDataError(
            f"{seq.clip_id}: clip shorter than window ({F} < {window_size})")
    starts = range(0, F - window_size + 1, stride)
    windows = np.stack([seq.frames[s:s + window_size] for s in starts])
    origins = [(seq.clip_id, s) for s in starts]
    return WindowBatch(windows, origins, window_size)


def add_gaussian_noise(batch: WindowBatch, sigma: float, seed: int) -> WindowBatch:
    """Element-wise i.i.d. N(0, sigma^2) corruption; deterministic per seed."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return WindowBatch(batch.windows.copy(), list(batch.origins),
                           batch.window_size)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.normal(0.0, sigma, size=batch.windows.shape)
    return WindowBatch(batch.windows + noise, list(batch.origins),
                       batch.window_size)


def shuffle_windows(batch: WindowBatch, seed: int) -> WindowBatch:
    """Deterministic permutation of windows with origins kept aligned."""
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(batch.batch_size)
    return WindowBatch(batch.windows[perm],
                       [batch.origins[i] for i in perm], batch.window_size)


def concat_batches(batches: list[WindowBatch]) -> WindowBatch:
    if not batches:
        raise ValueError("no batches to concatenate")
    w = batches[0].window_size
    if any(b.window_size != w for b in batches):
        raise PoseDataError("window sizes differ across batches")
    return WindowBatch(np.concatenate([b.windows for b in batches]),
                       [o for b in batches for o in b.origins], w)
