"""Dynamics metric, discrete curvature, and transition detection."""
import csv

import numpy as np
import pytest

from admloc.adm import (AdmError, AdmSeries, compute_adm, detect_transitions,
                        embed_sequence, export_adm_curve, second_difference,
                        smooth_series)
from admloc.model import ModelConfig, init_params
from admloc.skeleton import PoseSequence, WindowBatch


def series(values, fps=60.0, window_size=7):
    values = np.asarray(values, dtype=np.float64)
    return AdmSeries(clip_id="s", values=values,
                     window_origins=np.arange(len(values)),
                     window_size=window_size, fps=fps)


def detect_raw(values, min_strength=0.0):
    return detect_transitions(series(values), smoothing=1,
                              min_strength=min_strength)


CUBIC = [(b - 3.0) ** 3 for b in range(7)]


# -- metric -------------------------------------------------------------------

def test_metric_of_zero_embedding_is_zero():
    emb = np.zeros((3, 7, 16, 4))
    windows = WindowBatch(np.zeros((3, 7, 16, 2)),
                          [("c", i) for i in range(3)], 7)
    adm = compute_adm(emb, windows, fps=60.0)
    assert np.array_equal(adm.values, np.zeros(3))


def test_metric_single_entry_three_gives_three():
    emb = np.zeros((1, 7, 16, 4))
    emb[0, 2, 5, 1] = 3.0
    windows = WindowBatch(np.zeros((1, 7, 16, 2)), [("c", 0)], 7)
    assert compute_adm(emb, windows, fps=60.0).values[0] == 3.0


def test_metric_is_absolutely_homogeneous(rng):
    emb = rng.normal(size=(4, 7, 16, 8))
    windows = WindowBatch(np.zeros((4, 7, 16, 2)),
                          [("c", i) for i in range(4)], 7)
    base = compute_adm(emb, windows, fps=60.0).values
    scaled = compute_adm(-2.5 * emb, windows, fps=60.0).values
    assert np.abs(scaled - 2.5 * base).max() <= 1e-12


def test_metric_values_non_negative(rng):
    emb = rng.normal(size=(5, 7, 16, 8))
    windows = WindowBatch(np.zeros((5, 7, 16, 2)),
                          [("c", i) for i in range(5)], 7)
    assert (compute_adm(emb, windows, fps=60.0).values >= 0).all()


# -- curvature ----------------------------------------------------------------

def test_curvature_of_constant_series_is_zero():
    curv = second_difference(series([4.0] * 6))
    assert np.array_equal(curv.values, np.zeros(4))


def test_curvature_of_linear_ramp_is_zero():
    curv = second_difference(series(np.arange(8.0)))
    assert np.abs(curv.values).max() == 0.0


def test_curvature_of_cubic_hand_arithmetic():
    curv = second_difference(series(CUBIC))
    assert np.abs(curv.values - [-12.0, -6.0, 0.0, 6.0, 12.0]).max() <= 1e-12


def test_curvature_needs_three_windows():
    with pytest.raises(AdmError, match="3"):
        second_difference(series([1.0, 2.0]))


def test_curvature_length_is_b_minus_two():
    assert len(second_difference(series(np.arange(9.0) ** 2)).values) == 7


# -- detector -----------------------------------------------------------------

def test_cubic_yields_single_inflection_at_center():
    points = detect_raw(CUBIC)
    assert len(points) == 1
    p = points[0]
    assert p.kind == "inflection"
    assert p.window_index == pytest.approx(3.0, abs=1e-12)


def test_constant_and_affine_series_yield_nothing():
    assert detect_raw([2.0] * 8, min_strength=1e-12) == []
    assert detect_raw(np.arange(8.0) * 0.5 + 1.0, min_strength=1e-12) == []


def test_peak_reported_as_maximum_not_inflection():
    points = detect_raw([1.0, 2.0, 4.0, 2.0, 1.0])
    kinds = [(p.window_index, p.kind) for p in points]
    assert (2.0, "maximum") in kinds
    assert all(k != "inflection" for _, k in kinds)


def test_valley_reported_as_minimum():
    points = detect_raw([4.0, 2.0, 1.0, 2.0, 4.0])
    assert any(p.kind == "minimum" and p.window_index == 2.0 for p in points)


def test_detector_shift_invariance(rng):
    values = rng.normal(size=10)
    base = detect_raw(values)
    shifted = detect_raw(values + 17.5)
    assert [p.kind for p in base] == [p.kind for p in shifted]
    # interpolated crossings re-round under the shifted arithmetic
    assert np.abs(np.array([p.window_index for p in base])
                  - [p.window_index for p in shifted]).max() <= 1e-9


def test_detector_scale_monotonicity(rng):
    """Positive scaling preserves the index set; strengths scale along, so
    a proportionally scaled threshold selects the same points."""
    values = rng.normal(size=12)
    alpha = 3.7
    base = detect_raw(values)
    scaled = detect_raw(values * alpha)
    assert [(p.window_index, p.kind) for p in base] == \
        [(p.window_index, p.kind) for p in scaled]
    for b, s in zip(base, scaled):
        assert s.strength == pytest.approx(alpha * b.strength, rel=1e-9)
    threshold = 0.2
    kept = [p.window_index for p in detect_raw(values, min_strength=threshold)]
    kept_scaled = [p.window_index
                   for p in detect_raw(values * alpha,
                                       min_strength=threshold * alpha)]
    assert kept == kept_scaled


def test_detector_locality(rng):
    """With smoothing off, whether index b is reported depends only on
    S[b-2..b+2]."""
    values = rng.normal(size=14)
    target = 6.0
    base = {p.window_index for p in detect_raw(values)
            if abs(p.window_index - target) <= 0.5}
    tweaked = values.copy()
    tweaked[:3] += rng.normal(size=3) * 5.0
    tweaked[11:] -= 2.0
    after = {p.window_index for p in detect_raw(tweaked)
             if abs(p.window_index - target) <= 0.5}
    assert base == after


def test_detector_requires_five_windows():
    with pytest.raises(AdmError, match="5"):
        detect_raw([1.0, 2.0, 1.0, 2.0])


def test_even_smoothing_rejected():
    with pytest.raises(AdmError, match="odd"):
        detect_transitions(series(np.arange(8.0)), smoothing=4)


def test_smoothing_one_is_identity(rng):
    values = rng.normal(size=9)
    assert np.array_equal(smooth_series(values, 1), values)


def test_smoothing_preserves_length_and_averages():
    values = np.array([0.0, 0.0, 3.0, 0.0, 0.0])
    out = smooth_series(values, 3)
    assert out.shape == values.shape
    assert out[2] == pytest.approx(1.0)


def test_output_sorted_by_window_index(rng):
    for seed in range(20):
        r = np.random.Generator(np.random.PCG64(seed))
        points = detect_raw(r.normal(size=15))
        indices = [p.window_index for p in points]
        assert indices == sorted(indices)


def test_strength_threshold_filters():
    weak_and_strong = [0.0, 0.1, 0.0, 5.0, -5.0, 0.2, 0.0, 0.1]
    all_points = detect_raw(weak_and_strong)
    strong = detect_raw(weak_and_strong, min_strength=1.0)
    assert len(strong) <= len(all_points)
    assert all(p.strength >= 1.0 for p in strong)


def test_frame_attribution_is_window_center():
    adm = series(CUBIC, window_size=7)
    p = detect_raw(CUBIC)[0]
    assert p.frame == pytest.approx(p.window_index + 3.0)
    assert adm.frame_at(0) == 3.0


# -- embedding extraction -----------------------------------------------------

def test_embed_sequence_serial_order(mpii):
    cfg = ModelConfig(num_blocks=1, embed_dim=4, cheb_k=2)
    params = init_params(cfg)
    rng = np.random.Generator(np.random.PCG64(0))
    seq = PoseSequence(rng.normal(size=(10, 16, 2)), fps=60.0, clip_id="e")
    emb, windows = embed_sequence(params, seq, mpii)
    assert emb.shape[0] == 4
    assert [s for _, s in windows.origins] == [0, 1, 2, 3]


def test_embed_sequence_deterministic_and_batch_size_invariant(mpii):
    cfg = ModelConfig(num_blocks=1, embed_dim=4, cheb_k=2)
    params = init_params(cfg)
    rng = np.random.Generator(np.random.PCG64(1))
    seq = PoseSequence(rng.normal(size=(20, 16, 2)), fps=60.0, clip_id="e")
    a, _ = embed_sequence(params, seq, mpii)
    b, _ = embed_sequence(params, seq, mpii)
    c, _ = embed_sequence(params, seq, mpii, batch_size=3)
    assert np.array_equal(a, b)
    assert np.abs(a - c).max() <= 1e-12


def test_embed_sequence_shapes_under_default_config(mpii):
    params = init_params(ModelConfig())
    rng = np.random.Generator(np.random.PCG64(2))
    seq = PoseSequence(rng.normal(size=(10, 16, 2)), fps=60.0, clip_id="e")
    emb, _ = embed_sequence(params, seq, mpii)
    assert emb.shape == (4, 7, 16, 64)
    head, _ = embed_sequence(params, seq, mpii, use_head=True)
    assert head.shape == (4, 7, 16, 2)


def test_embed_sequence_rejects_short_clip(mpii):
    params = init_params(ModelConfig())
    seq = PoseSequence(np.zeros((5, 16, 2)) + np.eye(16)[None, :, :2],
                       fps=60.0, clip_id="short")
    with pytest.raises(Exception, match="shorter than window"):
        embed_sequence(params, seq, mpii)


# -- CSV export ---------------------------------------------------------------

def test_export_row_count_and_header(tmp_path):
    values = [1.0, 2.0, 4.0, 2.0]
    adm = series(values)
    curv = second_difference(adm)
    path = tmp_path / "curve.csv"
    export_adm_curve(adm, curv, [], path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["window", "frame", "adm", "curvature", "kind", "strength"]
    assert len(rows) == 5


def test_export_round_trip_bit_exact(tmp_path, rng):
    values = rng.normal(size=6) + 5.0
    adm = series(values)
    curv = second_difference(adm)
    points = detect_transitions(adm, smoothing=1)
    path = tmp_path / "curve.csv"
    export_adm_curve(adm, curv, points, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for b, row in enumerate(rows):
        assert float(row[2]) == values[b]
        if 1 <= b <= len(values) - 2:
            assert float(row[3]) == curv.values[b - 1]
        else:
            assert row[3] == ""


def test_export_transition_rows_are_subset(tmp_path, rng):
    values = rng.normal(size=9)
    adm = series(values)
    curv = second_difference(adm)
    points = detect_transitions(adm, smoothing=1)
    path = tmp_path / "curve.csv"
    export_adm_curve(adm, curv, points, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    flagged = [row for row in rows if row[4]]
    assert len(flagged) <= len(rows)
    for row in flagged:
        assert row[4] in ("inflection", "maximum", "minimum")
        assert float(row[5]) >= 0.0
