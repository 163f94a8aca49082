"""Scoring detected transitions against ground-truth demarcations.

Predictions are matched greedily (strongest first) to the nearest unmatched
truth frame within a tolerance; mAP comes from a pooled, monotone-envelope
interpolated precision-recall sweep and localization latency is the mean
absolute matched offset in milliseconds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adm import compute_adm, detect_transitions, embed_sequence
from .model import ModelParams, scaled_laplacian
from .skeleton import DemarcationSet, PoseSequence, SkeletonGraph


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    match_tolerance: float = 5.0  # frames
    fps_override: float | None = None
    per_label: bool = False

    def __post_init__(self):
        if self.match_tolerance < 0:
            raise EvalError("match_tolerance must be >= 0")


@dataclass
class Matching:
    """One clip's matching outcome for one label class."""
    label: str
    # (pred frame, strength, matched truth frame or None), strongest first
    predictions: list[tuple[float, float, float | None]]
    num_truth: int

    @property
    def tp(self) -> int:
        return sum(1 for _, _, m in self.predictions if m is not None)

    @property
    def fp(self) -> int:
        return len(self.predictions) - self.tp

    @property
    def fn(self) -> int:
        return self.num_truth - self.tp


@dataclass
class LabelScore:
    label: str
    ap: float | None
    latency_ms: float | None
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    partitions: dict[str, list[LabelScore]] = field(default_factory=dict)
    skipped_clips: list[str] = field(default_factory=list)

    def summary(self, partition: str) -> tuple[float | None, float | None]:
        """(mAP percent, mean latency ms) over labels of one partition."""
        scores = self.partitions[partition]
        aps = [s.ap for s in scores if s.ap is not None]
        lats = [s.latency_ms for s in scores if s.latency_ms is not None]
        return (float(np.mean(aps)) if aps else None,
                float(np.mean(lats)) if lats else None)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["partition", "label", "ap", "latency_ms",
                             "tp", "fp", "fn"])
            for part in sorted(self.partitions):
                for s in self.partitions[part]:
                    writer.writerow([
                        part, s.label,
                        "" if s.ap is None else f"{s.ap:.4f}",
                        "" if s.latency_ms is None else f"{s.latency_ms:.4f}",
                        s.tp, s.fp, s.fn])

    def format_table(self) -> str:
        parts = sorted(self.partitions)
        lines = [f"{'partition':<12}{'mAP (%)':>10}{'latency (ms)':>14}"
                 f"{'TP':>6}{'FP':>6}{'FN':>6}"]
        for part in parts:
            scores = self.partitions[part]
            m_ap, lat = self.summary(part)
            tp = sum(s.tp for s in scores)
            fp = sum(s.fp for s in scores)
            fn = sum(s.fn for s in scores)
            lines.append(f"{part:<12}"
                         f"{'--' if m_ap is None else f'{m_ap:.2f}':>10}"
                         f"{'--' if lat is None else f'{lat:.2f}':>14}"
                         f"{tp:>6}{fp:>6}{fn:>6}")
        return "\n".join(lines)


def match_transitions(predicted: list[tuple[float, float]],
                      truth_frames: list[float],
                      config: EvalConfig, label: str = "all") -> Matching:
    """Greedy one-to-one matching, strongest prediction first.

    `predicted` holds (frame, strength) pairs; ties in distance break toward
    the earlier truth frame.
    """
    order = sorted(range(len(predicted)),
                   key=lambda i: (-predicted[i][1], predicted[i][0]))
    taken: set[int] = set()
    results: list[tuple[float, float, float | None]] = []
    for i in order:
        frame, strength = predicted[i]
        best = None
        best_key = None
        for ti, tf in enumerate(truth_frames):
            if ti in taken:
                continue
            dist = abs(frame - tf)
            if dist > config.match_tolerance:
                continue
            key = (dist, tf)
            if best_key is None or key < best_key:
                best, best_key = ti, key
        if best is not None:
            taken.add(best)
            results.append((frame, strength, truth_frames[best]))
        else:
            results.append((frame, strength, None))
    return Matching(label=label, predictions=results, num_truth=len(truth_frames))


def average_precision(matchings: list[Matching]) -> float | None:
    """Pooled AP in percent, monotone-envelope interpolated; None if no truth."""
    num_truth = sum(m.num_truth for m in matchings)
    if num_truth == 0:
        return None
    pooled = [(strength, matched is not None)
              for m in matchings for _, strength, matched in m.predictions]
    if not pooled:
        return 0.0
    pooled.sort(key=lambda x: -x[0])
    tp = np.cumsum([1.0 if hit else 0.0 for _, hit in pooled])
    fp = np.cumsum([0.0 if hit else 1.0 for _, hit in pooled])
    recall = tp / num_truth
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return 100.0 * ap


def localization_latency(matchings: list[Matching], fps: float) -> float | None:
    """Mean |pred - truth| over matched pairs, in milliseconds."""
    offsets = [abs(frame - matched)
               for m in matchings for frame, _, matched in m.predictions
               if matched is not None]
    if not offsets:
        return None
    return float(np.mean(offsets)) * 1000.0 / fps


def _score_label(matchings: list[Matching], fps: float, label: str) -> LabelScore:
    return LabelScore(
        label=label,
        ap=average_precision(matchings),
        latency_ms=localization_latency(matchings, fps),
        tp=sum(m.tp for m in matchings),
        fp=sum(m.fp for m in matchings),
        fn=sum(m.fn for m in matchings))


def evaluate_clips(clip_results: list[tuple[DemarcationSet, list[tuple[float, float]], float]],
                   config: EvalConfig) -> list[LabelScore]:
    """Score (truth, predictions, fps) triples, pooled or per label."""
    if not clip_results:
        return []
    fps = config.fps_override or clip_results[0][2]
    if config.per_label:
        labels = sorted({name for truth, _, _ in clip_results
                         for name in truth.names})
        scores = []
        for label in labels:
            matchings = []
            for truth, preds, _ in clip_results:
                frames = [float(f) for n, f in truth.labels if n == label]
                matchings.append(match_transitions(preds, frames, config, label))
            scores.append(_score_label(matchings, fps, label))
        return scores
    matchings = [match_transitions(preds, [float(f) for f in truth.frames],
                                   config) for truth, preds, _ in clip_results]
    return [_score_label(matchings, fps, "all")]


def run_eval(dataset: list[PoseSequence], params: ModelParams,
             graph: SkeletonGraph, config: EvalConfig,
             partitions: dict[str, list[str]] | None = None,
             smoothing: int = 5, min_strength: float = 0.0,
             use_head: bool = False) -> EvalReport:
    """Embed, compute the metric, detect, and score every annotated clip.

    `partitions` maps partition name to clip_ids; unlisted clips and the
    default case fall into "all". A combined "avg" row is added when both
    train and test partitions are present.
    """
    report = EvalReport()
    scaled_lap = scaled_laplacian(graph)
    clip_to_part: dict[str, str] = {}
    if partitions:
        for part, ids in partitions.items():
            for cid in ids:
                clip_to_part[cid] = part
    grouped: dict[str, list[tuple[DemarcationSet, list[tuple[float, float]], float]]] = {}
    for clip in sorted(dataset, key=lambda c: c.clip_id):
        if clip.demarcations is None:
            report.skipped_clips.append(clip.clip_id)
            continue
        emb, windows = embed_sequence(params, clip, graph, use_head=use_head,
                                      scaled_lap=scaled_lap)
        adm = compute_adm(emb, windows, clip.fps)
        preds = [(p.frame, p.strength)
                 for p in detect_transitions(adm, smoothing=smoothing,
                                             min_strength=min_strength)]
        part = clip_to_part.get(clip.clip_id, "all")
        grouped.setdefault(part, []).append((clip.demarcations, preds, clip.fps))
    for part, results in grouped.items():
        report.partitions[part] = evaluate_clips(results, config)
    if "train" in grouped and "test" in grouped:
        report.partitions["avg"] = evaluate_clips(
            grouped["train"] + grouped["test"], config)
    return report
