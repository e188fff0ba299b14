"""Hypothesis analysis tests: mask grids, pseudo-toxic composition, the
brute-force scan oracle, outlier exclusion on constructed fixtures, the
perceptual metric, evidence calibration, KDE closed forms, and the posterior."""

import json
import math

import numpy as np
import pytest

from triggerscope import analysis as A
from triggerscope import data as D
from triggerscope import models as M
from triggerscope import tensor as T
from triggerscope.errors import CheckpointFormatError, ConfigError, InputError
from triggerscope.inversion import MentalImage
from triggerscope.models import ArchitectureConfig, Block
from triggerscope.tensor import Tensor

_trapz = getattr(np, "trapezoid", None) or np.trapz


def make_image(label, trial, pixels=None, shape=(1, 32, 32), seed=0):
    if pixels is None:
        pixels = np.random.default_rng(seed).uniform(size=shape).astype(np.float32)
    return MentalImage(pixels, label, trial, 0.0, label)


def make_hyp(image, origin, loss, size=12, shape=(1, 32, 32)):
    return A.Hypothesis(image, A.Mask(tuple(origin), size, shape), loss)


class StubMetric:
    """Constant-distance stand-in for the perceptual metric."""

    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, a, b):
        return self.value


# ------------------------------------------------------------------- masks


def test_mask_grid_counts():
    assert len(A.generate_masks((1, 32, 32), 12, stride=1)) == 441
    assert len(A.generate_masks((1, 32, 32), 12, stride=2)) == 121
    assert len(A.generate_masks((1, 32, 32), 32, stride=1)) == 1


def test_mask_tensor_support():
    mask = A.Mask((3, 5), 12, (1, 32, 32))
    m = mask.tensor
    assert m.shape == (1, 32, 32)
    assert m.sum() == 144
    assert np.all(m[0, 3:15, 5:17] == 1.0)
    m[0, 3:15, 5:17] = 0.0
    assert np.all(m == 0.0)


def test_mask_edge_flush_positions_included():
    masks = A.generate_masks((1, 32, 32), 12, stride=7)
    origins = {mk.origin for mk in masks}
    rows = sorted({o[0] for o in origins})
    assert rows == [0, 7, 14, 20]  # 20 = 32 - 12 appended for full coverage
    assert (20, 20) in origins


def test_mask_row_major_order_and_determinism():
    masks = A.generate_masks((1, 32, 32), 12, stride=2)
    origins = [mk.origin for mk in masks]
    assert origins == sorted(origins)
    assert origins == [mk.origin for mk in A.generate_masks((1, 32, 32), 12, stride=2)]


def test_mask_validation():
    with pytest.raises(InputError):
        A.generate_masks((1, 32, 32), 33)
    with pytest.raises(InputError):
        A.generate_masks((1, 32, 32), 12, stride=0)


# ------------------------------------------------------------- composition


def test_compose_exact_selection():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 32, 32)).astype(np.float32)
    z = rng.uniform(size=(1, 32, 32)).astype(np.float32)
    mask = A.Mask((4, 6), 12, (1, 32, 32))
    out = A.compose_pseudo_toxic(x, z, mask)
    assert np.array_equal(out[:, 4:16, 6:18], z[:, 4:16, 6:18])
    outside = np.ones((32, 32), dtype=bool)
    outside[4:16, 6:18] = False
    assert np.array_equal(out[0][outside], x[0][outside])


def test_compose_shape_mismatch():
    mask = A.Mask((0, 0), 2, (1, 4, 4))
    with pytest.raises(InputError):
        A.compose_pseudo_toxic(np.zeros((1, 4, 4)), np.zeros((1, 5, 5)), mask)


# ---------------------------------------------------------------- the scan


def _toy_problem():
    cfg = M.ArchitectureConfig("toy", (1, 3, 3), (M.Block("plain", 4, convs=1, pool=1),),
                               num_classes=3)
    clf = M.build_classifier(cfg, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    images = [
        MentalImage(rng.uniform(size=(1, 3, 3)).astype(np.float32), 1, 0, 0.0, 1),
        MentalImage(rng.uniform(size=(1, 3, 3)).astype(np.float32), 2, 1, 0.0, 2),
    ]
    all_masks = A.generate_masks((1, 3, 3), 2, stride=1)
    masks = [all_masks[0], all_masks[3]]
    normative = [
        D.LabeledSample(rng.uniform(size=(1, 3, 3)).astype(np.float32), int(rng.integers(3)))
        for _ in range(4)
    ]
    return clf, images, masks, normative


def test_scan_matches_brute_force_enumeration():
    clf, images, masks, normative = _toy_problem()
    x, _ = D.stack(normative)
    expected = {}
    for im in images:
        for mask in masks:
            m = mask.tensor
            composed = (1.0 - m) * x + m * im.pixels
            with T.no_grad():
                logits = M.forward(clf, Tensor(composed)).data
            logp = T.log_softmax(logits)
            per_sample = (-logp[np.arange(len(x)), im.label]).astype(np.float64)
            expected[(id(im), mask.origin)] = float(per_sample.mean())
    ranked = A.scan_hypotheses(clf, images, masks, normative, batch_size=len(normative))
    assert len(ranked) == 4
    for hyp in ranked:
        assert hyp.loss == expected[(id(hyp.image), hyp.origin)]
    assert [h.loss for h in ranked] == sorted(expected.values())


def test_score_hypothesis_matches_scan():
    clf, images, masks, normative = _toy_problem()
    ranked = A.scan_hypotheses(clf, images, masks, normative, batch_size=len(normative))
    for hyp in ranked:
        fresh = A.Hypothesis(hyp.image, hyp.mask, 0.0)
        assert A.score_hypothesis(clf, fresh, normative, batch_size=len(normative)) == hyp.loss
        assert fresh.loss == hyp.loss


def test_scan_tie_break_ordering():
    clf, _, masks, normative = _toy_problem()
    for t in clf.params.values():
        t.data[...] = 0.0  # constant logits: every hypothesis ties at ln(3)
    rng = np.random.default_rng(7)
    images = [
        MentalImage(rng.uniform(size=(1, 3, 3)).astype(np.float32), lab, tri, 0.0, lab)
        for lab, tri in [(2, 1), (0, 3), (1, 0), (0, 2)]
    ]
    ranked = A.scan_hypotheses(clf, images, masks, normative)
    assert all(np.isclose(h.loss, math.log(3), atol=1e-6) for h in ranked)
    keys = [(h.label, h.trial, h.origin) for h in ranked]
    assert keys == sorted(keys)


def test_scan_input_validation():
    clf, images, masks, normative = _toy_problem()
    with pytest.raises(InputError):
        A.scan_hypotheses(clf, [], masks, normative)
    with pytest.raises(InputError):
        A.scan_hypotheses(clf, images, [], normative)
    with pytest.raises(InputError):
        A.scan_hypotheses(clf, images, masks, [])
    with pytest.raises(InputError):
        A.scan_hypotheses(clf, images, masks, normative, mode="turbo")
    with pytest.raises(InputError):
        A.score_hypothesis(clf, A.Hypothesis(images[0], masks[0], 0.0), [])


def test_scan_fused_mode_matches_exact():
    # splitting the first convolution by linearity changes only the float
    # rounding, never the ranking on a well-separated problem
    rng = np.random.default_rng(21)
    cfg = ArchitectureConfig(name="mid", input_shape=(1, 16, 16),
                             blocks=(Block("plain", 8, convs=1, pool=2),
                                     Block("plain", 16, convs=1, pool=2)),
                             num_classes=4)
    clf = M.build_classifier(cfg, np.random.default_rng(2))
    images = [
        MentalImage(rng.uniform(size=(1, 16, 16)).astype(np.float32), lab, tri, 0.0, lab)
        for lab in range(4) for tri in range(2)
    ]
    masks = A.generate_masks((1, 16, 16), size=6, stride=5)
    normative = [D.LabeledSample(rng.uniform(size=(1, 16, 16)).astype(np.float32), int(i % 4)) for i in range(6)]
    exact = A.scan_hypotheses(clf, images, masks, normative, mode="exact")
    fused = A.scan_hypotheses(clf, images, masks, normative, mode="fused")
    exact_by_key = {(id(h.image), h.origin): h.loss for h in exact}
    for h in fused:
        assert np.isclose(h.loss, exact_by_key[(id(h.image), h.origin)], rtol=1e-5, atol=1e-7)


def test_scan_fused_mode_needs_plain_first_block():
    clf, images, masks, normative = _toy_problem()
    cfg = ArchitectureConfig(name="res", input_shape=(1, 3, 3),
                             blocks=(Block("residual", 4, pool=1),), num_classes=3)
    res = M.build_classifier(cfg, np.random.default_rng(0))
    with pytest.raises(InputError):
        A.scan_hypotheses(res, images, masks, normative, mode="fused")


# ------------------------------------------------------- perceptual metric


def test_metric_identity_symmetry_nonnegativity():
    rng = np.random.default_rng(1)
    metric = A.PerceptualMetric()
    a = rng.uniform(size=(1, 16, 16)).astype(np.float32)
    b = rng.uniform(size=(1, 16, 16)).astype(np.float32)
    assert metric(a, a) < 1e-6
    assert metric(a, b) == metric(b, a)
    assert metric(a, b) > 0.0


def test_metric_zero_vs_unit_image():
    metric = A.PerceptualMetric()
    zero = np.zeros((1, 32, 32), dtype=np.float32)
    unit = np.ones((1, 32, 32), dtype=np.float32)
    assert metric(zero, unit) >= 0.5


def test_metric_deterministic_across_instances():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(1, 12, 12)).astype(np.float32)
    b = rng.uniform(size=(1, 12, 12)).astype(np.float32)
    assert A.PerceptualMetric()(a, b) == A.PerceptualMetric()(a, b)


def test_metric_minmax_normalization_and_clip():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(1, 12, 12)).astype(np.float32)
    b = rng.uniform(size=(1, 12, 12)).astype(np.float32)
    raw = A.PerceptualMetric().raw(a, b)
    assert raw > 0
    assert np.isclose(A.PerceptualMetric(lo=0.0, hi=2 * raw)(a, b), 0.5)
    assert A.PerceptualMetric(lo=0.0, hi=raw / 2)(a, b) == 1.0  # clipped above
    assert A.PerceptualMetric(lo=raw + 0.1, hi=raw + 0.2)(a, b) == 0.0  # clipped below
    assert np.isclose(A.PerceptualMetric(lo=raw / 2, hi=3 * raw / 2)(a, b), 0.5)
    with pytest.raises(InputError):
        A.PerceptualMetric(lo=1.0, hi=1.0)


def test_metric_shape_mismatch():
    with pytest.raises(InputError):
        A.PerceptualMetric()(np.zeros((1, 8, 8)), np.zeros((1, 9, 9)))


def test_metric_handles_small_patches():
    rng = np.random.default_rng(4)
    metric = A.PerceptualMetric()
    a = rng.uniform(size=(1, 2, 2)).astype(np.float32)
    b = rng.uniform(size=(1, 2, 2)).astype(np.float32)
    d = metric(a, b)
    assert np.isfinite(d) and 0.0 <= d <= 1.0


def test_default_metric_helper():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    b = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    assert A.perceptual_distance(a, b) == A.PerceptualMetric()(a, b)


# ----------------------------------------------------------- moving average


def test_moving_average_hand_oracle():
    out = A.moving_average(np.array([0.0, 1, 2, 3, 4, 5]), 5)
    assert np.allclose(out, [1.0, 1.5, 2.0, 3.0, 3.5, 4.0])
    assert len(out) == 6


def test_moving_average_window_one_is_identity():
    v = np.array([3.0, 1.0, 4.0])
    assert np.array_equal(A.moving_average(v, 1), v)


def test_moving_average_preserves_constants():
    assert np.allclose(A.moving_average(np.full(50, 0.7), 5), 0.7)


# --------------------------------------------------------- outlier exclusion


def permissive(**kw):
    return A.AnalysisConfig(homogeneous_threshold=0, **kw)


def test_intra_cluster_keeps_minimum_loss_centroid():
    img = make_image(7, 0)
    hyps = [make_hyp(img, (4, 4), 0.1), make_hyp(img, (5, 5), 0.2), make_hyp(img, (6, 6), 0.3)]
    out = A.exclude_outliers(hyps, permissive(), StubMetric())
    assert [(h.origin, h.loss) for h in out] == [((4, 4), 0.1)]


def test_intra_far_origins_stay_separate():
    img = make_image(7, 0)
    hyps = [make_hyp(img, (4, 4), 0.1), make_hyp(img, (7, 7), 0.2)]
    out = A.exclude_outliers(hyps, permissive(), StubMetric())
    assert {h.origin for h in out} == {(4, 4), (7, 7)}


def test_intra_joins_first_cluster_within_radius():
    img = make_image(7, 0)
    hyps = [make_hyp(img, (0, 0), 0.1), make_hyp(img, (4, 4), 0.2), make_hyp(img, (2, 2), 0.3)]
    out = A.exclude_outliers(hyps, permissive(), StubMetric())
    # (2,2) is within radius of both centroids but joins the earlier (0,0)
    assert {h.origin for h in out} == {(0, 0), (4, 4)}


def test_clusters_are_per_source_image():
    a, b = make_image(7, 0, seed=1), make_image(7, 1, seed=2)
    hyps = [make_hyp(a, (4, 4), 0.1), make_hyp(b, (4, 4), 0.2)]
    out = A.exclude_outliers(hyps, permissive(), StubMetric())
    assert len(out) == 2


def test_top_k_truncation():
    img = make_image(3, 0)
    hyps = [make_hyp(img, (3 * (i // 5), 3 * (i % 5)), 0.01 * (i + 1)) for i in range(25)]
    out = A.exclude_outliers(hyps, permissive(top_k=20), StubMetric())
    assert len(out) == 20
    assert max(h.loss for h in out) <= 0.20 + 1e-12


def test_identical_patterns_across_trials_support_each_other():
    pixels = np.random.default_rng(9).uniform(size=(1, 32, 32)).astype(np.float32)
    hyps = [make_hyp(make_image(7, trial, pixels.copy()), (4, 4), 0.1 + 0.01 * trial)
            for trial in range(3)]
    out = A.exclude_outliers(hyps, A.AnalysisConfig(), A.PerceptualMetric())
    assert len(out) == 3
    assert all(h.label == 7 and h.origin == (4, 4) for h in out)


def test_unique_pattern_in_one_trial_is_excluded():
    out = A.exclude_outliers([make_hyp(make_image(7, 0), (4, 4), 0.1)],
                             A.AnalysisConfig(), A.PerceptualMetric())
    assert out == []


def test_same_trial_does_not_support():
    img = make_image(5, 0)
    hyps = [make_hyp(img, (0, 0), 0.1), make_hyp(img, (10, 10), 0.2)]
    out = A.exclude_outliers(hyps, A.AnalysisConfig(), StubMetric(0.0))
    assert out == []


def test_different_class_does_not_support():
    hyps = [make_hyp(make_image(3, 0, seed=1), (4, 4), 0.1),
            make_hyp(make_image(5, 1, seed=2), (4, 4), 0.2)]
    out = A.exclude_outliers(hyps, A.AnalysisConfig(), StubMetric(0.0))
    assert out == []


def test_support_requires_intersecting_neighborhoods():
    near = [make_hyp(make_image(5, 0, seed=1), (0, 0), 0.1),
            make_hyp(make_image(5, 1, seed=2), (4, 4), 0.2)]
    far = [make_hyp(make_image(5, 0, seed=1), (0, 0), 0.1),
           make_hyp(make_image(5, 1, seed=2), (5, 5), 0.2)]
    assert len(A.exclude_outliers(near, A.AnalysisConfig(), StubMetric(0.0))) == 2
    assert A.exclude_outliers(far, A.AnalysisConfig(), StubMetric(0.0)) == []


def test_support_requires_similar_patches():
    hyps = [make_hyp(make_image(5, 0, seed=1), (4, 4), 0.1),
            make_hyp(make_image(5, 1, seed=2), (4, 4), 0.2)]
    assert A.exclude_outliers(hyps, A.AnalysisConfig(), StubMetric(0.2)) == []
    assert len(A.exclude_outliers(hyps, A.AnalysisConfig(), StubMetric(0.05))) == 2


def test_homogeneous_threshold_two_needs_three_trials():
    def trio(n):
        return [make_hyp(make_image(5, t, seed=t), (4, 4), 0.1 + 0.01 * t) for t in range(n)]

    cfg = A.AnalysisConfig(homogeneous_threshold=2)
    assert A.exclude_outliers(trio(2), cfg, StubMetric(0.0)) == []
    assert len(A.exclude_outliers(trio(3), cfg, StubMetric(0.0))) == 3


# -------------------------------------------------------------- evidence


def test_evidence_sample_counts_and_range(evidence_model):
    assert len(evidence_model.intra) == 1900  # 10 classes x C(20,2) pairs
    assert len(evidence_model.inter) == 4000  # 10 classes x 20 x 20 pairs
    for arr in (evidence_model.intra, evidence_model.inter):
        assert np.all(arr >= 0.0) and np.all(arr <= 1.0)
        assert np.all(np.diff(arr) >= -1e-12)  # smoothing preserves sorted order
    assert evidence_model.metric_hi > evidence_model.metric_lo
    assert evidence_model.evidence_hi > evidence_model.evidence_lo
    assert evidence_model.surrogate0_pixels.shape == (200, 1, 32, 32)
    assert np.all(np.bincount(evidence_model.surrogate0_labels, minlength=10) == 20)


def test_evidence_metric_calibration_anchors(evidence_model):
    # the zero-vs-unit image distance must land high on the calibrated axis
    metric = evidence_model.metric()
    zero = np.zeros((1, 32, 32), dtype=np.float32)
    unit = np.ones((1, 32, 32), dtype=np.float32)
    assert metric(zero, unit) >= 0.5
    # pooled-median split: about half of each population normalizes to zero
    at_zero = (evidence_model.intra == 0.0).sum() + (evidence_model.inter == 0.0).sum()
    total = len(evidence_model.intra) + len(evidence_model.inter)
    assert 0.25 <= at_zero / total <= 0.75


def test_evidence_distributions_separate(evidence_model):
    # clean-vs-clean mental images must look closer than clean-vs-infected
    assert evidence_model.inter.mean() > evidence_model.intra.mean()


def test_evidence_model_round_trip(evidence_model, tmp_path):
    path = tmp_path / "evidence.json"
    A.save_evidence_model(evidence_model, path)
    loaded = A.load_evidence_model(path)
    assert np.array_equal(loaded.intra, evidence_model.intra)
    assert np.array_equal(loaded.inter, evidence_model.inter)
    assert np.array_equal(loaded.surrogate0_pixels, evidence_model.surrogate0_pixels)
    assert np.array_equal(loaded.surrogate0_labels, evidence_model.surrogate0_labels)
    assert loaded.bandwidth == evidence_model.bandwidth
    assert loaded.window == evidence_model.window
    assert loaded.metric_lo == evidence_model.metric_lo
    assert loaded.metric_hi == evidence_model.metric_hi
    assert loaded.evidence_lo == evidence_model.evidence_lo
    assert loaded.evidence_hi == evidence_model.evidence_hi


def test_evidence_model_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json at all {")
    with pytest.raises(CheckpointFormatError):
        A.load_evidence_model(bad)
    wrong_version = tmp_path / "v99.json"
    wrong_version.write_text(json.dumps({"version": 99}))
    with pytest.raises(CheckpointFormatError):
        A.load_evidence_model(wrong_version)
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"version": 2, "bandwidth": 0.5, "window": 5,
                                   "metric_lo": 0.0, "metric_hi": 1.0,
                                   "intra": [0.1], "inter": [0.2]}))
    with pytest.raises(CheckpointFormatError):
        A.load_evidence_model(missing)


def _stub_evidence_model(pixels, labels, evidence_lo=0.0, evidence_hi=1.0):
    return A.EvidenceModel(
        intra=np.array([0.1, 0.2]), inter=np.array([0.7, 0.8]), bandwidth=0.5, window=1,
        metric_lo=0.0, metric_hi=1.0, evidence_lo=evidence_lo, evidence_hi=evidence_hi,
        surrogate0_pixels=pixels, surrogate0_labels=labels)


def test_compute_evidence_aggregates_raw_then_normalizes():
    rng = np.random.default_rng(12)
    pixels = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
    labels = np.array([0, 0, 0, 1])  # unequal mate counts pin the per-hypothesis mean
    model = _stub_evidence_model(pixels, labels, evidence_lo=0.05, evidence_hi=0.95)
    metric = model.metric()
    hyps = [make_hyp(make_image(0, 0, rng.uniform(size=(1, 8, 8)).astype(np.float32)), (0, 0), 0.1, size=2, shape=(1, 8, 8)),
            make_hyp(make_image(1, 1, rng.uniform(size=(1, 8, 8)).astype(np.float32)), (2, 2), 0.2, size=2, shape=(1, 8, 8))]
    got = A.compute_evidence(hyps, model)
    manual_raw = np.mean([
        np.mean([metric.raw(hyps[0].image.pixels, pixels[i]) for i in range(3)]),
        metric.raw(hyps[1].image.pixels, pixels[3]),
    ])
    assert np.isclose(got, model.normalize_evidence(manual_raw), rtol=1e-12)
    best = A.compute_evidence(hyps, model, best_only=True)
    manual_best = np.mean([metric.raw(hyps[0].image.pixels, pixels[i]) for i in range(3)])
    assert np.isclose(best, model.normalize_evidence(manual_best), rtol=1e-12)


def test_compute_evidence_empty_and_missing_class():
    pixels = np.zeros((2, 1, 8, 8), dtype=np.float32)
    labels = np.array([0, 0])
    model = _stub_evidence_model(pixels, labels)
    assert A.compute_evidence([], model) is None
    orphan = make_hyp(make_image(9, 0, np.zeros((1, 8, 8), dtype=np.float32)), (0, 0), 0.1,
                      size=2, shape=(1, 8, 8))
    with pytest.raises(InputError):
        A.compute_evidence([orphan], model)


# ------------------------------------------------------------------- KDE


def test_kde_single_sample_closed_form():
    expected = 1.0 / (1 * 0.5 * np.sqrt(2.0 * np.pi))
    assert A.kde_pdf([0.0], 0.5, 0.0) == expected
    assert np.isclose(expected, 0.7979, atol=5e-5)


def test_kde_two_sample_hand_value():
    phi = lambda u: np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    expected = (phi(0.0) + phi(1.0)) / 2.0
    assert np.isclose(A.kde_pdf([0.0, 1.0], 1.0, 0.0), expected, rtol=1e-12)


def test_kde_integrates_to_one():
    rng = np.random.default_rng(0)
    samples = rng.uniform(size=50)
    grid = np.linspace(-2.0, 3.0, 50001)
    total = _trapz(A.kde_pdf(samples, 0.1, grid), grid)
    assert abs(total - 1.0) <= 1e-3


def test_kde_degenerate_narrow_gaussian():
    peak = A.kde_pdf([0.5, 0.5, 0.5], 0.4, 0.5)
    assert peak == 1.0 / (1 * 1e-3 * np.sqrt(2.0 * np.pi))
    assert A.kde_pdf([0.5, 0.5, 0.5], 0.4, 0.51) < 1e-6
    grid = np.linspace(0.48, 0.52, 400001)
    total = _trapz(A.kde_pdf([0.5, 0.5], 0.4, grid), grid)
    assert abs(total - 1.0) <= 1e-3


def test_kde_vectorized_matches_scalar():
    samples = [0.1, 0.4, 0.9]
    grid = np.linspace(0.0, 1.0, 11)
    vec = A.kde_pdf(samples, 0.2, grid)
    assert np.array_equal(vec, [A.kde_pdf(samples, 0.2, q) for q in grid])


def test_kde_validation():
    with pytest.raises(InputError):
        A.kde_pdf([], 0.5, 0.0)
    with pytest.raises(InputError):
        A.kde_pdf([0.1], 0.0, 0.0)
    with pytest.raises(InputError):
        A.kde_pdf([0.1], -1.0, 0.0)


# --------------------------------------------------------------- posterior


def _toy_model(intra, inter, bandwidth=0.5):
    return A.EvidenceModel(
        intra=np.asarray(intra, dtype=np.float64),
        inter=np.asarray(inter, dtype=np.float64),
        bandwidth=bandwidth, window=5, metric_lo=0.0, metric_hi=1.0,
        evidence_lo=0.0, evidence_hi=1.0,
        surrogate0_pixels=np.zeros((1, 1, 2, 2), dtype=np.float32),
        surrogate0_labels=np.array([0]),
    )


def test_posterior_symmetric_case_is_exactly_half():
    samples = np.linspace(0.2, 0.8, 25)
    model = _toy_model(samples, samples.copy())
    for mode in ("absolute", "scaled"):
        cfg = A.AnalysisConfig(kde_bandwidth_mode=mode)
        assert A.infer_posterior(0.5, model, cfg) == 0.5


def test_posterior_complement_sums_to_one_exactly():
    rng = np.random.default_rng(13)
    model = _toy_model(rng.uniform(0.1, 0.4, 40), rng.uniform(0.5, 0.9, 40))
    for e in rng.uniform(0.0, 1.0, 50):
        p1 = A.infer_posterior(float(e), model)
        assert 0.0 <= p1 <= 1.0
        assert (1.0 - p1) + p1 == 1.0


def test_posterior_favors_nearer_state():
    model = _toy_model(np.linspace(0.15, 0.25, 50), np.linspace(0.75, 0.85, 50))
    assert A.infer_posterior(0.8, model) > 0.9
    assert A.infer_posterior(0.2, model) < 0.1


def test_posterior_prior_weighting():
    samples = np.linspace(0.4, 0.6, 30)
    model = _toy_model(samples, samples.copy())
    assert np.isclose(A.infer_posterior(0.5, model, priors=(0.1, 0.9)), 0.9, rtol=1e-12)


def test_posterior_underflow_returns_prior_with_warning():
    model = _toy_model([0.1, 0.2], [0.3, 0.4], bandwidth=0.001)
    cfg = A.AnalysisConfig(kde_bandwidth=0.001, kde_bandwidth_mode="absolute")
    with pytest.warns(RuntimeWarning):
        p = A.infer_posterior(500.0, model, cfg, priors=(0.3, 0.7))
    assert p == 0.7


def test_posterior_rejects_nonfinite_evidence():
    model = _toy_model([0.1], [0.9])
    with pytest.raises(InputError):
        A.infer_posterior(float("nan"), model)


def test_state_bandwidth_modes():
    samples = np.linspace(0.0, 1.0, 100)
    cfg_abs = A.AnalysisConfig(kde_bandwidth_mode="absolute")
    assert A._state_bandwidth(samples, cfg_abs) == 0.5
    cfg_scaled = A.AnalysisConfig()
    expected = 0.5 * float(np.std(samples)) * 100 ** (-0.2)
    assert np.isclose(A._state_bandwidth(samples, cfg_scaled), max(expected, 0.02), rtol=1e-12)
    tiny = np.full(100, 0.3)
    assert A._state_bandwidth(tiny, cfg_scaled) == 0.02  # floor engages


def test_config_validation():
    with pytest.raises(ConfigError):
        A.AnalysisConfig(kde_bandwidth=0.0)
    with pytest.raises(ConfigError):
        A.AnalysisConfig(prior_infected=1.5)
    with pytest.raises(ConfigError):
        A.AnalysisConfig(kde_bandwidth_mode="weird")
    with pytest.raises(ConfigError):
        A.AnalysisConfig(top_k=-1)


# ------------------------------------------------------------ report/analyze


def test_report_flag_mirrors_empty_hypotheses():
    with pytest.raises(InputError):
        A.InfectionReport([], None, None, False)
    hyp = make_hyp(make_image(0, 0), (0, 0), 0.1)
    with pytest.raises(InputError):
        A.InfectionReport([hyp], 0.5, 0.5, True)
    assert A.InfectionReport([], None, None, True).not_applicable
    assert not A.InfectionReport([hyp], 0.5, 0.5, False).not_applicable


def _tiny_analysis_setup():
    cfg = M.ArchitectureConfig("tiny", (1, 8, 8), (M.Block("plain", 4, convs=1, pool=2),),
                               num_classes=4)
    clf = M.build_classifier(cfg, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    images = [MentalImage(rng.uniform(size=(1, 8, 8)).astype(np.float32), lab, tri, 0.0, lab)
              for lab, tri in [(0, 0), (0, 1), (1, 0), (1, 1)]]
    normative = [D.LabeledSample(rng.uniform(size=(1, 8, 8)).astype(np.float32), int(rng.integers(4)))
                 for _ in range(6)]
    model = A.EvidenceModel(
        intra=np.linspace(0.1, 0.3, 40), inter=np.linspace(0.6, 0.9, 40),
        bandwidth=0.5, window=5, metric_lo=0.0, metric_hi=1.0,
        evidence_lo=0.0, evidence_hi=1.0,
        surrogate0_pixels=rng.uniform(size=(4, 1, 8, 8)).astype(np.float32),
        surrogate0_labels=np.array([0, 0, 1, 1]),
    )
    return clf, images, normative, model


def test_analyze_end_to_end_consistency():
    clf, images, normative, model = _tiny_analysis_setup()
    cfg = A.AnalysisConfig(mask_size=3, scan_stride=2)
    report = A.analyze(clf, images, normative, cfg, model)
    assert report.not_applicable == (len(report.hypotheses) == 0)
    if report.not_applicable:
        assert report.evidence is None and report.posterior is None
    else:
        assert 0.0 <= report.posterior <= 1.0
        assert 0.0 <= report.evidence <= 1.0


def test_analyze_not_applicable_path():
    clf, images, normative, model = _tiny_analysis_setup()
    cfg = A.AnalysisConfig(mask_size=3, scan_stride=2, homogeneous_threshold=10)
    report = A.analyze(clf, images, normative, cfg, model)
    assert report.not_applicable
    assert report.hypotheses == [] and report.evidence is None and report.posterior is None
