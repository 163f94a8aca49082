"""Synthetic pose corpora with planted motion-regime changes.

Clips start from a fixed standing rest pose and evolve through a list of
motion regimes (stationary, oscillation, rotation, drift); each regime
boundary is a known ground-truth transition, so the end-to-end pipeline can
be scored without any real dataset. Also hosts a deliberately naive
curvature-crossing oracle used to cross-check the production detector.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import (DemarcationSet, PoseSequence, SkeletonGraph,
                       build_mpii_skeleton, save_pose_file)

# Hand-authored 16-joint standing pose (x right, y up), MPII joint order,
# roughly 2 units tall and centered near the pelvis.
REST_POSE = np.array([
    [0.25, -1.00],   # r_ankle
    [0.22, -0.50],   # r_knee
    [0.18, 0.00],    # r_hip
    [-0.18, 0.00],   # l_hip
    [-0.22, -0.50],  # l_knee
    [-0.25, -1.00],  # l_ankle
    [0.00, 0.02],    # pelvis
    [0.00, 0.55],    # thorax
    [0.00, 0.72],    # upper_neck
    [0.00, 0.95],    # head_top
    [0.45, -0.10],   # r_wrist
    [0.40, 0.22],    # r_elbow
    [0.28, 0.52],    # r_shoulder
    [-0.28, 0.52],   # l_shoulder
    [-0.40, 0.22],   # l_elbow
    [-0.45, -0.10],  # l_wrist
])


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class RegimeSpec:
    """One motion regime: `kind` in {stationary, oscillation, rotation, drift}."""
    duration: int
    kind: str
    frequency_hz: float = 0.0      # oscillation
    amplitude: float = 0.0         # oscillation
    angular_velocity: float = 0.0  # rotation, rad/frame
    velocity: tuple[float, float] = (0.0, 0.0)  # drift, units/frame
    phase_offsets: tuple[float, ...] | None = None  # per joint, oscillation

    def __post_init__(self):
        if self.duration < 1:
            raise SynthError("regime duration must be >= 1")
        if self.kind not in ("stationary", "oscillation", "rotation", "drift"):
            raise SynthError(f"unknown motion kind {self.kind!r}")
        for v in (self.frequency_hz, self.amplitude, self.angular_velocity,
                  *self.velocity):
            if not np.isfinite(v):
                raise SynthError("regime parameters must be finite")


@dataclass(frozen=True)
class SyntheticClip:
    sequence: PoseSequence
    planted_transitions: tuple[int, ...]
    seed: int
    specs: tuple[RegimeSpec, ...]


def _regime_frames(base: np.ndarray, spec: RegimeSpec, fps: float,
                   num_joints: int) -> np.ndarray:
    t = np.arange(spec.duration, dtype=np.float64)
    if spec.kind == "stationary":
        return np.repeat(base[None], spec.duration, axis=0)
    if spec.kind == "oscillation":
        phases = np.asarray(spec.phase_offsets if spec.phase_offsets is not None
                            else np.zeros(num_joints))
        wave = spec.amplitude * np.sin(
            2.0 * np.pi * spec.frequency_hz * t[:, None] / fps + phases[None, :])
        frames = np.repeat(base[None], spec.duration, axis=0)
        frames[:, :, 0] += wave
        return frames
    if spec.kind == "rotation":
        center = base.mean(axis=0)
        angles = spec.angular_velocity * (t + 1.0)
        cos, sin = np.cos(angles), np.sin(angles)
        rel = base - center
        frames = np.empty((spec.duration, num_joints, 2))
        frames[:, :, 0] = center[0] + cos[:, None] * rel[:, 0] - sin[:, None] * rel[:, 1]
        frames[:, :, 1] = center[1] + sin[:, None] * rel[:, 0] + cos[:, None] * rel[:, 1]
        return frames
    # drift
    offset = np.asarray(spec.velocity)[None, :] * (t + 1.0)[:, None]
    return base[None] + offset[:, None, :]


def generate_clip(specs: list[RegimeSpec], skeleton: SkeletonGraph | None = None,
                  seed: int = 0, jitter_sigma: float = 0.0,
                  fps: float = 60.0, clip_id: str | None = None) -> SyntheticClip:
    """Concatenate regimes starting from the rest pose, with Gaussian jitter.

    Each regime continues from the last frame of the previous one, so the
    planted transitions are curvature breaks rather than teleports.
    """
    if not specs:
        raise SynthError("need at least one regime")
    if skeleton is None:
        skeleton = build_mpii_skeleton()
    num_joints = skeleton.num_joints
    rng = np.random.Generator(np.random.PCG64(seed))
    base = REST_POSE[:num_joints].copy()
    pieces = []
    boundaries = []
    total = 0
    for spec in specs:
        frames = _regime_frames(base, spec, fps, num_joints)
        pieces.append(frames)
        base = frames[-1].copy()
        total += spec.duration
        boundaries.append(total)
    coords = np.concatenate(pieces)
    if jitter_sigma > 0:
        coords = coords + rng.normal(0.0, jitter_sigma, size=coords.shape)
    transitions = tuple(boundaries[:-1])
    demarcations = None
    if transitions:
        demarcations = DemarcationSet(tuple(
            (f"m{i + 1}", f) for i, f in enumerate(transitions)))
    if clip_id is None:
        clip_id = f"synth-{seed:08d}"
    seq = PoseSequence(coords, fps=fps, clip_id=clip_id,
                       demarcations=demarcations)
    return SyntheticClip(sequence=seq, planted_transitions=transitions,
                         seed=seed, specs=tuple(specs))


def _sample_regime(rng: np.random.Generator, num_joints: int,
                   min_duration: int, max_duration: int) -> RegimeSpec:
    duration = int(rng.integers(min_duration, max_duration + 1))
    kind = ["stationary", "oscillation", "rotation", "drift"][int(rng.integers(4))]
    if kind == "oscillation":
        return RegimeSpec(duration, kind,
                          frequency_hz=float(rng.uniform(0.5, 3.0)),
                          amplitude=float(rng.uniform(0.1, 0.4)),
                          phase_offsets=tuple(rng.uniform(0, 2 * np.pi, num_joints)))
    if kind == "rotation":
        return RegimeSpec(duration, kind,
                          angular_velocity=float(rng.uniform(0.02, 0.1))
                          * (1 if rng.random() < 0.5 else -1))
    if kind == "drift":
        return RegimeSpec(duration, kind,
                          velocity=(float(rng.uniform(-0.02, 0.02)),
                                    float(rng.uniform(-0.02, 0.02))))
    return RegimeSpec(duration, kind)


def generate_corpus(n_clips: int, seed: int = 0, jitter_sigma: float = 0.005,
                    min_regimes: int = 2, max_regimes: int = 4,
                    min_duration: int = 30, max_duration: int = 120,
                    fps: float = 60.0,
                    skeleton: SkeletonGraph | None = None) -> list[SyntheticClip]:
    """Deterministic corpus of varied multi-regime clips."""
    if n_clips < 1:
        raise SynthError("n_clips must be >= 1")
    if skeleton is None:
        skeleton = build_mpii_skeleton()
    clips = []
    for i in range(n_clips):
        clip_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rng = np.random.Generator(np.random.PCG64(clip_seed))
        n_regimes = int(rng.integers(min_regimes, max_regimes + 1))
        specs = []
        prev_kind = None
        for _ in range(n_regimes):
            spec = _sample_regime(rng, skeleton.num_joints,
                                  min_duration, max_duration)
            while spec.kind == prev_kind:  # adjacent regimes must differ
                spec = _sample_regime(rng, skeleton.num_joints,
                                      min_duration, max_duration)
            specs.append(spec)
            prev_kind = spec.kind
        clips.append(generate_clip(specs, skeleton, seed=clip_seed,
                                   jitter_sigma=jitter_sigma, fps=fps,
                                   clip_id=f"synth-{seed:04d}-{i:04d}"))
    return clips


def write_corpus(clips: list[SyntheticClip], out_dir: str | Path) -> None:
    """Emit canonical pose + annotation CSVs so synthetic data flows through
    the same ingestion path as real data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        cid = clip.sequence.clip_id
        save_pose_file(clip.sequence, out / f"{cid}.pose.csv",
                       annotation_path=(out / f"{cid}.annot.csv"
                                        if clip.sequence.demarcations else None))


def curvature_oracle(series: list[float]) -> list[float]:
    """Literal brute-force transition-index scan over a metric series.

    Independent of the production detector: plain-Python second differences,
    zero crossings (interpolated), exact-zero plateaus with opposite-sign
    flanks, and suppression of crossings adjacent to a local extremum.
    Returns inflection indices only.
    """
    n = len(series)
    if n < 5:
        raise SynthError("need at least 5 values")
    curv = [series[b + 1] - 2.0 * series[b] + series[b - 1]
            for b in range(1, n - 1)]
    extrema = []
    for b in range(1, n - 1):
        left = series[b] - series[b - 1]
        right = series[b + 1] - series[b]
        if (left > 0 and right < 0) or (left < 0 and right > 0):
            extrema.append(b)
    out: list[float] = []
    for i in range(len(curv) - 1):
        a, b = curv[i], curv[i + 1]
        if a * b < 0:
            out.append((i + 1) + a / (a - b))
        elif b == 0 and a != 0:
            # leftmost zero of a plateau flanked by opposite signs
            j = i + 1
            while j < len(curv) and curv[j] == 0:
                j += 1
            if j < len(curv) and a * curv[j] < 0:
                out.append(float(i + 2))
    return [idx for idx in out
            if not any(abs(idx - e) <= 1.0 for e in extrema)]
