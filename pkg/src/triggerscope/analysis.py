"""Hypothesis analysis: mask-scan maximum likelihood estimation, three-stage
outlier exclusion, a seed-frozen perceptual metric, surrogate evidence
calibration, and the Bayesian infection posterior.

A hypothesis pairs a mental image z with a rectangular mask m; its score is
the average loss of the mask's target class over pseudo-toxic compositions

    x_tilde = (1 - m) * x + m * z

across the normative set. Low loss means the masked pattern reliably drags
arbitrary clean samples to the hypothesis class - the behavioral signature
of a backdoor trigger.

Outlier exclusion keeps the top-k hypotheses, collapses per-image clusters of
nearby masks to their minimum-loss centroids (intra-exclusion), and then
drops centroids that are not corroborated by similar-looking centroids at
intersecting positions in other trials of the same class (inter-exclusion).

The infection posterior compares the evidence e (mean perceptual distance
between query mental images in H* and clean-surrogate images of the same
class) against kernel density estimates of e under the uninfected and
infected states, calibrated from two surrogate models.
"""

from __future__ import annotations

import base64
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import tensor as T
from .data import stack
from .errors import CheckpointFormatError, ConfigError, InputError
from .tensor import Tensor

PERCEPTUAL_METRIC_SEED = 1742
_EVIDENCE_VERSION = 2


@dataclass(frozen=True)
class AnalysisConfig:
    mask_size: int = 12
    scan_stride: int = 2
    top_k: int = 20
    neighbor_radius: int = 2
    perceptual_threshold: float = 0.1
    homogeneous_threshold: int = 1
    kde_bandwidth: float = 0.5
    kde_bandwidth_mode: str = "scaled"  # "scaled": h = bw * sigma * n^(-1/5); "absolute": h = bw
    bandwidth_floor: float = 0.02
    moving_average_window: int = 5
    prior_infected: float = 0.5
    decision_threshold: float = 0.5
    evidence_best_only: bool = False

    def __post_init__(self):
        for name in ("mask_size", "scan_stride", "top_k", "neighbor_radius", "homogeneous_threshold",
                     "moving_average_window"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0.0 <= self.prior_infected <= 1.0:
            raise ConfigError(f"prior must be in [0,1], got {self.prior_infected}")
        if self.kde_bandwidth <= 0:
            raise ConfigError(f"KDE bandwidth must be > 0, got {self.kde_bandwidth}")
        if self.kde_bandwidth_mode not in ("scaled", "absolute"):
            raise ConfigError(f"unknown bandwidth mode {self.kde_bandwidth_mode!r}")


@dataclass(frozen=True)
class Mask:
    origin: tuple  # (row, col)
    size: int
    shape: tuple  # full image shape (C, H, W)

    @property
    def tensor(self) -> np.ndarray:
        m = np.zeros((1,) + tuple(self.shape[1:]), dtype=np.float32)
        r, c = self.origin
        m[0, r:r + self.size, c:c + self.size] = 1.0
        return m


@dataclass
class Hypothesis:
    image: object  # MentalImage
    mask: Mask
    loss: float

    @property
    def label(self) -> int:
        return self.image.label

    @property
    def trial(self) -> int:
        return self.image.trial

    @property
    def origin(self) -> tuple:
        return self.mask.origin

    def patch(self) -> np.ndarray:
        r, c = self.mask.origin
        s = self.mask.size
        return self.image.pixels[:, r:r + s, c:c + s]

    def sort_key(self):
        return (self.loss, self.label, self.trial, self.origin)


@dataclass
class InfectionReport:
    hypotheses: list
    evidence: float | None
    posterior: float | None
    not_applicable: bool

    def __post_init__(self):
        if self.not_applicable != (len(self.hypotheses) == 0):
            raise InputError("not_applicable must mirror an empty hypothesis set")


def generate_masks(image_shape, size: int, stride: int = 1) -> list:
    """All stride-spaced placements plus the edge-flush ones, row-major order."""
    c, h, w = image_shape
    if size > h or size > w:
        raise InputError(f"mask size {size} exceeds image {h}x{w}")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    rows = sorted(set(list(range(0, h - size + 1, stride)) + [h - size]))
    cols = sorted(set(list(range(0, w - size + 1, stride)) + [w - size]))
    return [Mask((r, col), size, tuple(image_shape)) for r in rows for col in cols]


def compose_pseudo_toxic(x: np.ndarray, z: np.ndarray, mask: Mask) -> np.ndarray:
    if x.shape != z.shape:
        raise InputError(f"image {x.shape} and mental image {z.shape} differ")
    m = mask.tensor.astype(x.dtype)
    return (1.0 - m) * x + m * z


def _batched_losses(classifier, batch: np.ndarray, labels: np.ndarray, batch_size: int) -> np.ndarray:
    """Per-sample cross-entropy of `labels` under the classifier."""
    out = np.empty(len(batch), dtype=np.float64)
    with T.no_grad():
        for lo in range(0, len(batch), batch_size):
            logits = M.forward(classifier, Tensor(batch[lo:lo + batch_size])).data
            logp = T.log_softmax(logits)
            y = labels[lo:lo + batch_size]
            out[lo:lo + batch_size] = -logp[np.arange(len(y)), y]
    return out


def score_hypothesis(classifier, hypothesis: Hypothesis, normative: list, batch_size: int = 512) -> float:
    """Average loss of the hypothesis class over pseudo-toxic compositions;
    the result is also stored on the hypothesis."""
    if not normative:
        raise InputError("normative set is empty")
    x, _ = stack(normative)
    composed = np.stack([compose_pseudo_toxic(xi, hypothesis.image.pixels, hypothesis.mask) for xi in x])
    labels = np.full(len(x), hypothesis.label, dtype=np.int64)
    loss = float(_batched_losses(classifier, composed, labels, batch_size).mean())
    hypothesis.loss = loss
    return loss


# Above this many (image, mask, normative) work units the scan splits the
# first convolution by linearity: conv(keep + pattern) = conv(keep) +
# conv(pattern), computing each half once per mask instead of once per pair.
# Results agree with the direct path up to float rounding (~1e-7 relative).
_FUSED_SCAN_MIN_WORK = 100_000


def _fused_first_block(classifier) -> tuple | None:
    """(weight, bias, pool size) when the first block is a single plain conv."""
    blocks = classifier.config.blocks
    if not blocks or blocks[0].kind != "plain" or blocks[0].convs != 1:
        return None
    return (classifier.params["block0.conv0.weight"],
            classifier.params["block0.conv0.bias"],
            M._pool_size(blocks[0]))


def _pool_offsets(x: np.ndarray, pool: int) -> np.ndarray:
    """Contiguous per-offset views [pool*pool, N, C, ho, wo] of the pooling
    windows, so the hot pairwise-sum loop reads sequential memory."""
    ho, wo = x.shape[2] // pool, x.shape[3] // pool
    return np.stack([x[:, :, di:ho * pool:pool, dj:wo * pool:pool]
                     for di in range(pool) for dj in range(pool)])


def _max_over_offsets(koff: np.ndarray, aoff: np.ndarray) -> np.ndarray:
    """max-pooled pre-activation of every pairwise sum keep[s] + adds[z]:
    max over window offsets of the shifted sums, which equals pooling each
    materialized sum (float max is exact). Returns [Z, S, C, ho, wo]."""
    out = aoff[0][:, None] + koff[0][None, :]
    tmp = np.empty_like(out)
    for t in range(1, len(koff)):
        np.add(aoff[t][:, None], koff[t][None, :], out=tmp)
        np.maximum(out, tmp, out=out)
    return out


def scan_hypotheses(classifier, mental_images: list, masks: list, normative: list,
                    batch_size: int = 1024, mode: str = "auto") -> list:
    """Score every (mental image, mask) pair; ascending by loss, ties broken
    by (class, trial, mask origin).

    ``mode``: "exact" forwards every composed image directly; "fused" uses
    the first-conv linearity split; "auto" picks fused for large scans on
    architectures whose first block is a single plain convolution.
    """
    if mode not in ("auto", "exact", "fused"):
        raise InputError(f"unknown scan mode {mode!r}")
    if not mental_images or not masks:
        raise InputError("need at least one mental image and one mask")
    if not normative:
        raise InputError("normative set is empty")
    x, _ = stack(normative)
    s = len(x)
    z_all = np.stack([im.pixels for im in mental_images]).astype(x.dtype)
    labels_all = np.array([im.label for im in mental_images], dtype=np.int64)
    first = _fused_first_block(classifier)
    work = len(mental_images) * len(masks) * s
    if mode == "fused" and first is None:
        raise InputError("fused scan needs a single plain conv as the first block")
    fused = mode == "fused" or (mode == "auto" and first is not None
                                and work >= _FUSED_SCAN_MIN_WORK)
    losses = np.empty((len(mental_images), len(masks)), dtype=np.float64)
    group = max(1, batch_size // s)
    with T.no_grad():
        for mi, mask in enumerate(masks):
            m = mask.tensor.astype(x.dtype)
            keep = x * (1.0 - m)  # [S,C,H,W]
            adds = z_all * m      # [Z,C,H,W]
            if fused:
                w0, b0, pool = first
                keep = T.conv2d(Tensor(keep), w0, b0, padding=1).data
                adds = T.conv2d(Tensor(adds), w0, None, padding=1).data
                if pool > 1:
                    koff = _pool_offsets(keep, pool)
                    aoff = _pool_offsets(adds, pool)
            for z0 in range(0, len(z_all), group):
                if fused:
                    # pool each shifted sum directly: never materializes the
                    # full pre-activation, and relu commutes with max
                    if pool > 1:
                        pre = _max_over_offsets(koff, aoff[:, z0:z0 + group])
                    else:
                        pre = adds[z0:z0 + group][:, None] + keep[None, :]
                    batch = pre.reshape(-1, *pre.shape[2:])
                    logits = M.forward_tail(classifier, T.relu(Tensor(batch)), 1).data
                else:
                    chunk = adds[z0:z0 + group]
                    batch = (keep[None, :] + chunk[:, None]).reshape(-1, *keep.shape[1:])
                    logits = M.forward(classifier, Tensor(batch)).data
                logp = T.log_softmax(logits)
                y = np.repeat(labels_all[z0:z0 + group], s)
                per = (-logp[np.arange(len(y)), y]).astype(np.float64)
                losses[z0:z0 + group, mi] = per.reshape(-1, s).mean(axis=1)
    hyps = [
        Hypothesis(mental_images[zi], masks[mi], float(losses[zi, mi]))
        for zi in range(len(mental_images))
        for mi in range(len(masks))
    ]
    hyps.sort(key=Hypothesis.sort_key)
    return hyps


# ---------------------------------------------------------- perceptual metric


class PerceptualMetric:
    """Seed-frozen random convolutional feature distance.

    Three ReLU conv layers (8/16/32 channels, 3x3, pool 2 between); the raw
    distance is the mean over layers of (1 - cosine similarity) between
    feature maps whose per-channel means have been removed. Centering strips
    each channel's DC response, so the cosine compares spatial structure
    rather than overall activation level - that is what lets a small local
    pattern move a whole-image distance.

    ``(lo, hi)`` min-max normalize raw distances to [0, 1] with clipping;
    an evidence-model build calibrates them against a patch-pair corpus so
    the similarity threshold (0.1 by default) lands at the measured boundary
    of cross-trial pattern consistency.
    """

    def __init__(self, seed: int = PERCEPTUAL_METRIC_SEED, lo: float = 0.0,
                 hi: float = 1.0, channels: int = 1):
        if not hi > lo:
            raise InputError(f"metric calibration needs hi > lo, got ({lo}, {hi})")
        rng = np.random.default_rng(seed)
        self.lo = float(lo)
        self.hi = float(hi)
        self.layers = []
        cin = channels
        for cout in (8, 16, 32):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3)).astype(np.float32)
            b = rng.normal(0.0, 0.1, size=cout).astype(np.float32)
            self.layers.append((Tensor(w), Tensor(b)))
            cin = cout

    def features(self, image: np.ndarray) -> list:
        x = Tensor(np.asarray(image, dtype=np.float32)[None])
        feats = []
        with T.no_grad():
            for i, (w, b) in enumerate(self.layers):
                x = T.relu(T.conv2d(x, w, b, padding=1))
                maps = x.data[0].astype(np.float64)
                maps = maps - maps.mean(axis=(1, 2), keepdims=True)
                feats.append(maps.reshape(-1))
                if i < len(self.layers) - 1 and min(x.data.shape[2:]) >= 2:
                    x = T.maxpool2d(x, 2)
        return feats

    @staticmethod
    def distance_from_features(feats_a: list, feats_b: list) -> float:
        total = 0.0
        for fa, fb in zip(feats_a, feats_b):
            na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
            if na < 1e-12 and nb < 1e-12:
                cos = 1.0
            elif na < 1e-12 or nb < 1e-12:
                cos = 0.0
            else:
                cos = float(fa @ fb / (na * nb))
            total += 1.0 - cos
        return total / len(feats_a)

    def raw(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.shape != b.shape:
            raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
        return self.distance_from_features(self.features(a), self.features(b))

    def normalize(self, raw) -> float:
        return float(np.clip((raw - self.lo) / (self.hi - self.lo), 0.0, 1.0))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.normalize(self.raw(a, b))


_default_metric = None


def perceptual_distance(a: np.ndarray, b: np.ndarray, metric: PerceptualMetric | None = None) -> float:
    global _default_metric
    if metric is None:
        if _default_metric is None:
            _default_metric = PerceptualMetric()
        metric = _default_metric
    return metric(a, b)


# ---------------------------------------------------------- outlier exclusion


def _chebyshev(a: tuple, b: tuple) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def exclude_outliers(sorted_hyps: list, cfg: AnalysisConfig,
                     metric: PerceptualMetric | None = None) -> list:
    """Top-k selection, intra-exclusion, inter-exclusion; may return []."""
    if metric is None:
        metric = PerceptualMetric()
    kept = sorted_hyps[:cfg.top_k]
    # intra-exclusion: cluster per source image by mask-origin proximity;
    # ascending-loss order makes each cluster founder its minimum-loss centroid
    clusters = {}  # id(image) -> list of centroids
    for h in kept:
        mine = clusters.setdefault(id(h.image), [])
        for centroid in mine:
            if _chebyshev(h.origin, centroid.origin) <= cfg.neighbor_radius:
                break
        else:
            mine.append(h)
    centroids = [c for group in clusters.values() for c in group]
    centroids.sort(key=Hypothesis.sort_key)
    # inter-exclusion: keep centroids corroborated by enough homogeneous
    # centroids - other trials, same class, intersecting neighborhoods
    # (Chebyshev <= 2*radius) and similar-looking masked patches
    survivors = []
    for c in centroids:
        support = 0
        for other in centroids:
            if other is c or other.label != c.label or other.trial == c.trial:
                continue
            if _chebyshev(c.origin, other.origin) > 2 * cfg.neighbor_radius:
                continue
            if metric(c.patch(), other.patch()) < cfg.perceptual_threshold:
                support += 1
        if support >= cfg.homogeneous_threshold:
            survivors.append(c)
    return survivors


# ------------------------------------------------------------- evidence model


@dataclass
class EvidenceModel:
    """Calibration artifact shared by every analysis run.

    Two separately calibrated min-max axes come out of the surrogate build:
    the *metric* axis ``(metric_lo, metric_hi)`` normalizes masked-patch
    distances for outlier exclusion, anchored so the similarity threshold
    falls at the measured boundary of cross-trial pattern consistency; the
    *evidence* axis ``(evidence_lo, evidence_hi)`` normalizes the full-image
    evidence statistic against the pooled intra/inter population, so
    sub-typical distances all read as 0 and the densest stretch of the
    population fills (0, 1].
    """

    intra: np.ndarray  # smoothed, normalized distances under the uninfected state
    inter: np.ndarray  # same under the infected state
    bandwidth: float
    window: int
    metric_lo: float
    metric_hi: float
    evidence_lo: float
    evidence_hi: float
    surrogate0_pixels: np.ndarray  # [N, C, H, W]
    surrogate0_labels: np.ndarray  # [N]

    def __post_init__(self):
        if len(self.intra) == 0 or len(self.inter) == 0:
            raise InputError("evidence model needs nonempty intra and inter samples")
        if not self.metric_hi > self.metric_lo:
            raise InputError(f"metric calibration needs hi > lo, got ({self.metric_lo}, {self.metric_hi})")
        if not self.evidence_hi > self.evidence_lo:
            raise InputError(f"evidence calibration needs hi > lo, got ({self.evidence_lo}, {self.evidence_hi})")

    def metric(self) -> PerceptualMetric:
        return PerceptualMetric(lo=self.metric_lo, hi=self.metric_hi,
                                channels=self.surrogate0_pixels.shape[1])

    def normalize_evidence(self, raw: float) -> float:
        return float(np.clip((raw - self.evidence_lo) / (self.evidence_hi - self.evidence_lo), 0.0, 1.0))


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered length-preserving moving average (partial windows at edges)."""
    if window <= 1:
        return np.asarray(values, dtype=np.float64).copy()
    v = np.asarray(values, dtype=np.float64)
    half = (window - 1) // 2
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + (window - half - 1), len(v) - 1) + 1
    return (csum[hi] - csum[lo]) / (hi - lo)


# Surrogate mental images get a longer inversion schedule than query images:
# the calibration populations must reflect settled patterns, not optimizer
# noise, and the s0 images double as the evidence statistic's reference set.
SURROGATE_INVERSION_ITERATIONS = 300


def _patch_pairs(feats: list) -> list:
    return [PerceptualMetric.distance_from_features(feats[i], feats[j])
            for i in range(len(feats)) for j in range(i + 1, len(feats))]


def consistent_patch_distances(metric: PerceptualMetric, imgs0: list, imgs1: list,
                               trigger, cfg: AnalysisConfig) -> list:
    """Raw distances over patch pairs that ought to look alike across trials:
    the infected surrogate's target class around the implant site, and every
    clean-surrogate class at the image center. Their median marks the raw
    boundary of cross-trial pattern consistency."""
    shape = (imgs0[0].pixels.shape if imgs0 else trigger.image_shape)
    size = cfg.mask_size
    origins = sorted({m.origin for m in generate_masks(shape, size, cfg.scan_stride)})
    anchor = (min(trigger.origin[0], shape[1] - size), min(trigger.origin[1], shape[2] - size))
    near = [o for o in origins if _chebyshev(o, anchor) <= 2 * cfg.neighbor_radius]
    raws = []
    target = [im for im in imgs1 if im.label == trigger.target_class]
    for r, c in near:
        feats = [metric.features(im.pixels[:, r:r + size, c:c + size]) for im in target]
        raws.extend(_patch_pairs(feats))
    by_class = {}
    for im in imgs0:
        by_class.setdefault(im.label, []).append(im)
    r, c = (shape[1] - size) // 2, (shape[2] - size) // 2
    for _, group in sorted(by_class.items()):
        feats = [metric.features(im.pixels[:, r:r + size, c:c + size]) for im in group]
        raws.extend(_patch_pairs(feats))
    return raws


def build_evidence_model(auxiliary: list, arch_config, seed: int, trigger, cfg: AnalysisConfig,
                         train_config=None, inversion_config=None) -> EvidenceModel:
    """Train clean and poisoned surrogates, invert both, and calibrate the
    evidence axis (from the intra/inter raw populations) and the patch
    metric axis (from cross-trial consistent patch pairs)."""
    from . import training as TR
    from .data import poison_dataset
    from .inversion import InversionConfig, invert_all

    rng = np.random.default_rng(seed)
    train_config = train_config or TR.TrainConfig(epochs=5, seed=int(rng.integers(2 ** 31)))
    inversion_config = inversion_config or InversionConfig(
        total_iterations=SURROGATE_INVERSION_ITERATIONS)

    clean = M.build_classifier(arch_config, np.random.default_rng(int(rng.integers(2 ** 31))))
    TR.train(clean, auxiliary, train_config)
    poisoned_data = poison_dataset(auxiliary, trigger, 0.5, np.random.default_rng(int(rng.integers(2 ** 31))))
    infected = M.build_classifier(arch_config, np.random.default_rng(int(rng.integers(2 ** 31))))
    TR.train(infected, poisoned_data, train_config)

    imgs0 = invert_all(clean, inversion_config, np.random.default_rng(int(rng.integers(2 ** 31))))
    imgs1 = invert_all(infected, inversion_config, np.random.default_rng(int(rng.integers(2 ** 31))))

    metric = PerceptualMetric(channels=arch_config.input_shape[0])
    by_class0, by_class1 = {}, {}
    for im in imgs0:
        by_class0.setdefault(im.label, []).append((im, metric.features(im.pixels)))
    for im in imgs1:
        by_class1.setdefault(im.label, []).append((im, metric.features(im.pixels)))
    intra_raw, inter_raw = [], []
    for y, group in sorted(by_class0.items()):
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                intra_raw.append(metric.distance_from_features(group[i][1], group[j][1]))
            for _, feats in by_class1.get(y, []):
                inter_raw.append(metric.distance_from_features(group[i][1], feats))

    # Evidence axis: the lower constant sits at the pooled median, so
    # sub-typical distances all normalize to 0; the upper at the pooled 99th
    # percentile, so a straggler pair cannot stretch the whole axis.
    pooled = np.concatenate([intra_raw, inter_raw]).astype(np.float64)
    evidence_lo = float(np.quantile(pooled, 0.50))
    evidence_hi = float(np.quantile(pooled, 0.99))
    if not evidence_hi > evidence_lo:
        evidence_lo, evidence_hi = 0.0, max(float(pooled.max()), 1e-6)

    def norm(raws):
        v = np.sort(np.asarray(raws, dtype=np.float64))
        return np.clip((v - evidence_lo) / (evidence_hi - evidence_lo), 0.0, 1.0)

    # Metric axis: anchor the similarity threshold at the consistency
    # boundary and the zero-vs-unit image distance near the top of the range.
    t_raw = float(np.median(consistent_patch_distances(metric, imgs0, imgs1, trigger, cfg)))
    d01_raw = metric.raw(np.zeros(arch_config.input_shape, dtype=np.float32),
                         np.ones(arch_config.input_shape, dtype=np.float32))
    thr = cfg.perceptual_threshold
    if 0.0 < thr < 0.5 and d01_raw > t_raw:
        span = (d01_raw - t_raw) / (1.0 - 2.0 * thr)
        metric_lo = t_raw - thr * span
        metric_hi = metric_lo + span
    else:
        metric_lo = 0.0
        metric_hi = t_raw / thr if t_raw > 0 and thr > 0 else 1.0

    return EvidenceModel(
        intra=moving_average(norm(intra_raw), cfg.moving_average_window),
        inter=moving_average(norm(inter_raw), cfg.moving_average_window),
        bandwidth=cfg.kde_bandwidth,
        window=cfg.moving_average_window,
        metric_lo=metric_lo,
        metric_hi=metric_hi,
        evidence_lo=evidence_lo,
        evidence_hi=evidence_hi,
        surrogate0_pixels=np.stack([im.pixels for im in imgs0]),
        surrogate0_labels=np.array([im.label for im in imgs0], dtype=np.int64),
    )


def save_evidence_model(model: EvidenceModel, path) -> None:
    blob = base64.b64encode(model.surrogate0_pixels.astype("<f4").tobytes()).decode("ascii")
    doc = {
        "version": _EVIDENCE_VERSION,
        "bandwidth": model.bandwidth,
        "window": model.window,
        "metric_lo": model.metric_lo,
        "metric_hi": model.metric_hi,
        "evidence_lo": model.evidence_lo,
        "evidence_hi": model.evidence_hi,
        "intra": [float(v) for v in model.intra],
        "inter": [float(v) for v in model.inter],
        "surrogate0": {
            "shape": list(model.surrogate0_pixels.shape),
            "labels": [int(v) for v in model.surrogate0_labels],
            "pixels_b64": blob,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_evidence_model(path) -> EvidenceModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not a valid evidence file ({exc})") from None
    if doc.get("version") != _EVIDENCE_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported evidence version {doc.get('version')!r}")
    try:
        shape = tuple(doc["surrogate0"]["shape"])
        pixels = np.frombuffer(
            base64.b64decode(doc["surrogate0"]["pixels_b64"]), dtype="<f4"
        ).reshape(shape).astype(np.float32)
        return EvidenceModel(
            intra=np.array(doc["intra"], dtype=np.float64),
            inter=np.array(doc["inter"], dtype=np.float64),
            bandwidth=float(doc["bandwidth"]),
            window=int(doc["window"]),
            metric_lo=float(doc["metric_lo"]),
            metric_hi=float(doc["metric_hi"]),
            evidence_lo=float(doc["evidence_lo"]),
            evidence_hi=float(doc["evidence_hi"]),
            surrogate0_pixels=pixels,
            surrogate0_labels=np.array(doc["surrogate0"]["labels"], dtype=np.int64),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed evidence file ({exc})") from None


def compute_evidence(selected: list, model: EvidenceModel, best_only: bool = False) -> float | None:
    """Evidence statistic: the raw perceptual distance between each selected
    hypothesis's mental image and the clean-surrogate images of the same
    class, averaged per hypothesis and then across hypotheses, normalized
    once on the model's evidence axis. None if nothing survived exclusion."""
    if not selected:
        return None
    hyps = selected[:1] if best_only else selected
    metric = model.metric()
    mate_feats = {}  # surrogate image index -> cached feature stack
    per_hyp = []
    for h in hyps:
        idx = np.flatnonzero(model.surrogate0_labels == h.label)
        if len(idx) == 0:
            raise InputError(f"no surrogate images for class {h.label}")
        own = metric.features(h.image.pixels)
        dists = []
        for i in idx:
            if i not in mate_feats:
                mate_feats[i] = metric.features(model.surrogate0_pixels[i])
            dists.append(metric.distance_from_features(own, mate_feats[i]))
        per_hyp.append(np.mean(dists))
    return model.normalize_evidence(float(np.mean(per_hyp)))


# ----------------------------------------------------------------- posterior


def kde_pdf(samples, bandwidth: float, query):
    """Gaussian-kernel density; degenerate samples fall back to a narrow
    Gaussian (sigma = 1e-3) at the common value."""
    s = np.asarray(samples, dtype=np.float64)
    if s.size == 0:
        raise InputError("KDE needs at least one sample")
    if bandwidth <= 0:
        raise InputError(f"bandwidth must be > 0, got {bandwidth}")
    if s.size > 1 and np.all(s == s.flat[0]):
        s = np.array([s.flat[0]])
        bandwidth = 1e-3
    q = np.asarray(query, dtype=np.float64)
    u = (q[..., None] - s) / bandwidth
    dens = np.exp(-0.5 * u * u).sum(axis=-1) / (s.size * bandwidth * np.sqrt(2.0 * np.pi))
    return float(dens) if np.isscalar(query) or q.ndim == 0 else dens


def _state_bandwidth(samples: np.ndarray, cfg: AnalysisConfig) -> float:
    if cfg.kde_bandwidth_mode == "absolute":
        return cfg.kde_bandwidth
    sigma = float(np.std(samples))
    h = cfg.kde_bandwidth * sigma * len(samples) ** (-1.0 / 5.0)
    return max(h, cfg.bandwidth_floor)


def infer_posterior(evidence: float, model: EvidenceModel, cfg: AnalysisConfig | None = None,
                    priors: tuple = (0.5, 0.5)) -> float:
    """P(s1 | e) by Bayes' rule over the two calibrated KDE likelihoods."""
    if not np.isfinite(evidence):
        raise InputError(f"evidence must be finite, got {evidence}")
    cfg = cfg or AnalysisConfig()
    p0, p1 = priors
    like0 = kde_pdf(model.intra, _state_bandwidth(model.intra, cfg), evidence)
    like1 = kde_pdf(model.inter, _state_bandwidth(model.inter, cfg), evidence)
    marginal = like0 * p0 + like1 * p1
    if marginal == 0.0:
        warnings.warn("both likelihoods underflowed; falling back to the prior", RuntimeWarning)
        return p1
    return like1 * p1 / marginal


def analyze(classifier, mental_images: list, normative: list, cfg: AnalysisConfig,
            evidence_model: EvidenceModel, batch_size: int = 1024) -> InfectionReport:
    """Full pass: scan, exclude outliers, compute evidence, infer posterior."""
    masks = generate_masks(classifier.config.input_shape, cfg.mask_size, cfg.scan_stride)
    ranked = scan_hypotheses(classifier, mental_images, masks, normative, batch_size)
    selected = exclude_outliers(ranked, cfg, evidence_model.metric())
    evidence = compute_evidence(selected, evidence_model, cfg.evidence_best_only)
    if evidence is None:
        return InfectionReport([], None, None, True)
    posterior = infer_posterior(evidence, evidence_model, cfg,
                                (1.0 - cfg.prior_infected, cfg.prior_infected))
    return InfectionReport(selected, evidence, posterior, False)
