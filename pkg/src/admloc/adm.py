"""Action Dynamics Metric: embedding norms per window, discrete curvature,
and transition detection.

The metric for window b is the Euclidean norm of that window's full
spatio-temporal embedding. Its discrete second difference
S[b+1] - 2 S[b] + S[b-1] is the curvature signal; zero crossings of the
curvature mark candidate transitions. Crossings that sit next to a local
extremum of the metric are reported as that extremum (maximum or minimum)
rather than as an inflection.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, forward, scaled_laplacian
from .skeleton import PoseSequence, SkeletonGraph, WindowBatch, partition_windows


class AdmError(ValueError):
    pass


@dataclass(frozen=True)
class AdmSeries:
    """Per-window metric values in serial window order (stride 1)."""
    clip_id: str
    values: np.ndarray
    window_origins: np.ndarray  # start frame per window
    window_size: int
    fps: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        o = np.asarray(self.window_origins, dtype=np.int64)
        if v.ndim != 1 or o.shape != v.shape:
            raise AdmError("values and window_origins must be aligned 1-D arrays")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "window_origins", o)

    def frame_at(self, window_index: float) -> float:
        """Window center frame for a possibly fractional window index."""
        base = float(self.window_origins[0])
        step = float(self.window_origins[1] - self.window_origins[0]) \
            if len(self.window_origins) > 1 else 1.0
        return base + step * window_index + (self.window_size - 1) / 2.0


@dataclass(frozen=True)
class CurvatureSeries:
    """Second differences for interior windows b = 1..B-2."""
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(v).all():
            raise AdmError("curvature contains non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class TransitionPoint:
    window_index: float
    frame: float
    kind: str  # inflection | maximum | minimum
    strength: float


def embed_sequence(params: ModelParams, seq: PoseSequence, graph: SkeletonGraph,
                   stride: int = 1, use_head: bool = False,
                   batch_size: int = 64,
                   scaled_lap: np.ndarray | None = None) -> tuple[np.ndarray, WindowBatch]:
    """Per-window embeddings in serial order.

    Returns (embeddings (B, W, J, D or C), windows). use_head switches to the
    post-FC reconstruction output instead of the block-stack embedding.
    """
    windows = partition_windows(seq, params.config.window_size, stride=stride)
    if scaled_lap is None:
        scaled_lap = scaled_laplacian(graph)
    chunks = []
    for start in range(0, windows.batch_size, batch_size):
        sub = WindowBatch(windows.windows[start:start + batch_size],
                          windows.origins[start:start + batch_size],
                          windows.window_size)
        emb, recon = forward(params, sub, graph, scaled_lap=scaled_lap)
        chunks.append((recon if use_head else emb).data)
    return np.concatenate(chunks), windows


def compute_adm(embeddings: np.ndarray, windows: WindowBatch,
                fps: float) -> AdmSeries:
    """Euclidean norm over all (frame, joint, channel) entries per window."""
    if embeddings.shape[0] == 0:
        raise AdmError("no embeddings")
    flat = embeddings.reshape(embeddings.shape[0], -1)
    values = np.sqrt((flat * flat).sum(axis=1))
    origins = np.array([start for _, start in windows.origins], dtype=np.int64)
    clip_id = windows.origins[0][0]
    return AdmSeries(clip_id=clip_id, values=values, window_origins=origins,
                     window_size=windows.window_size, fps=fps)


def second_difference(adm: AdmSeries) -> CurvatureSeries:
    s = adm.values
    if len(s) < 3:
        raise AdmError("need >= 3 windows for curvature")
    return CurvatureSeries(s[2:] - 2.0 * s[1:-1] + s[:-2])


def smooth_series(values: np.ndarray, length: int) -> np.ndarray:
    """Centered moving average with reflective padding; length must be odd."""
    if length <= 1:
        return values.copy()
    if length % 2 == 0:
        raise AdmError(f"smoothing length must be odd, got {length}")
    half = length // 2
    padded = np.pad(values, half, mode="reflect")
    kernel = np.full(length, 1.0 / length)
    return np.convolve(padded, kernel, mode="valid")


def _curvature_crossings(curv: np.ndarray) -> list[tuple[float, float]]:
    """(window_index, strength) for every zero crossing of the curvature.

    curv[i] is the curvature at window index i + 1. Strict sign changes are
    interpolated to a fractional index; runs of exact zeros flanked by
    opposite signs report the leftmost zero.
    """
    points: list[tuple[float, float]] = []
    n = len(curv)
    i = 0
    while i < n - 1:
        a, b = curv[i], curv[i + 1]
        if a * b < 0.0:
            frac = a / (a - b)
            points.append(((i + 1) + frac, abs(b - a)))
            i += 1
        elif b == 0.0:
            j = i + 1
            while j < n and curv[j] == 0.0:
                j += 1
            if j < n and a != 0.0 and a * curv[j] < 0.0:
                points.append((float(i + 2), abs(curv[j] - a) / 2.0))
            i = j
        else:
            i += 1
    return points


def _extrema(s: np.ndarray) -> list[tuple[int, str, float]]:
    """Local extrema of s via strict first-difference sign changes."""
    d = np.diff(s)
    out: list[tuple[int, str, float]] = []
    for b in range(1, len(s) - 1):
        if d[b - 1] > 0.0 and d[b] < 0.0:
            out.append((b, "maximum", abs(d[b] - d[b - 1]) / 2.0))
        elif d[b - 1] < 0.0 and d[b] > 0.0:
            out.append((b, "minimum", abs(d[b] - d[b - 1]) / 2.0))
    return out


def detect_transitions(adm: AdmSeries, smoothing: int = 5,
                       min_strength: float = 0.0) -> list[TransitionPoint]:
    """Transition points of the metric series.

    Local extrema of S are reported as maximum/minimum. Zero crossings of the
    discrete curvature are reported as inflections, except crossings within
    one window of an extremum, which belong to that extremum's bend rather
    than to a phase change.
    """
    s = adm.values
    if len(s) < 5:
        raise AdmError("need >= 5 windows to detect transitions")
    s = smooth_series(s, smoothing)
    curv = s[2:] - 2.0 * s[1:-1] + s[:-2]
    extrema = _extrema(s)
    points = [TransitionPoint(float(b), adm.frame_at(b), kind, strength)
              for b, kind, strength in extrema]
    extremum_indices = [b for b, _, _ in extrema]
    for idx, strength in _curvature_crossings(curv):
        if any(abs(idx - e) <= 1.0 for e in extremum_indices):
            continue
        points.append(TransitionPoint(idx, adm.frame_at(idx), "inflection", strength))
    points = [p for p in points if p.strength >= min_strength]
    points.sort(key=lambda p: p.window_index)
    return points


def export_adm_curve(adm: AdmSeries, curvature: CurvatureSeries,
                     transitions: list[TransitionPoint], path) -> None:
    """CSV rows window,frame,adm,curvature,kind,strength.

    Curvature cells are empty at the two boundary windows; transition kind
    and strength appear on the nearest integer window row.
    """
    by_window: dict[int, TransitionPoint] = {}
    for p in transitions:
        by_window.setdefault(int(round(p.window_index)), p)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "frame", "adm", "curvature", "kind", "strength"])
        for b in range(len(adm.values)):
            curv = ""
            if 1 <= b <= len(adm.values) - 2:
                curv = repr(float(curvature.values[b - 1]))
            p = by_window.get(b)
            writer.writerow([b, repr(adm.frame_at(b)), repr(float(adm.values[b])),
                             curv, p.kind if p else "",
                             repr(float(p.strength)) if p else ""])
