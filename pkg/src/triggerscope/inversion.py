"""Multi-scale sign-gradient model inversion.

Each trial starts from uniform noise at native resolution. Optimization runs
coarse-to-fine over a resolution ladder (4, 8, 16, 32 for a 32x32 input):
entering each scale, the running image is resampled to that scale and the
resampling residual

    rho = resample_down(z_max) - resample_up(z_min)

is added to restore detail lost at coarser scales (z_max is the initial
noise at native resolution, z_min its minimum-scale downsample). At a given
scale the update is

    z <- clamp01( z - delta * sgn(grad_z L(y, f(upsample(z)))) )

with the gradient chained through the differentiable bilinear upsample. The
per-scale iteration counts are stochastic: each non-final scale draws from
Uniform{0..cap} and the final scale receives the remaining total budget.

Because sgn(.) is invariant to positive scaling, trials can be batched
per step without changing any update; batching is an implementation detail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as M
from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

INTERMEDIATE_ITER_CAP = 12


@dataclass(frozen=True)
class InversionConfig:
    images_per_class: int = 20
    step_size: float = 0.1
    total_iterations: int = 50
    num_scales: int = 4
    per_scale_iterations: int | None = None  # fixed count per scale, overrides the budget split
    intermediate_cap: int = INTERMEDIATE_ITER_CAP
    seed: int = 0

    def __post_init__(self):
        if self.step_size < 0:
            raise ConfigError(f"step size must be >= 0, got {self.step_size}")
        if self.images_per_class < 1:
            raise ConfigError(f"images per class must be >= 1, got {self.images_per_class}")
        if self.num_scales < 1:
            raise ConfigError(f"need at least one scale, got {self.num_scales}")
        if self.total_iterations < 0:
            raise ConfigError(f"iteration budget must be >= 0, got {self.total_iterations}")

    def resolutions(self, h: int, w: int) -> list:
        """Strictly increasing ladder ending at native resolution."""
        ladder = [(h >> k, w >> k) for k in range(self.num_scales - 1, -1, -1)]
        if ladder[0][0] < 1 or ladder[0][1] < 1:
            raise ConfigError(f"{self.num_scales} scales exhaust a {h}x{w} input")
        return ladder


@dataclass
class MentalImage:
    pixels: np.ndarray  # [C, H, W] in [0,1]
    label: int
    trial: int
    loss: float
    predicted: int


def compute_resampling_residual(z_max: Tensor, z_min: Tensor, resolution) -> Tensor:
    """rho at the given resolution (Eq. 6-style difference of resamples)."""
    rh, rw = (resolution, resolution) if np.isscalar(resolution) else resolution
    down = T.resample_bilinear(z_max, rh, rw)
    up = T.resample_bilinear(z_min, rh, rw)
    return Tensor(down.data - up.data)


def _draw_schedule(cfg: InversionConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-scale iteration counts; the final scale absorbs the leftover budget."""
    if cfg.per_scale_iterations is not None:
        return np.full(cfg.num_scales, cfg.per_scale_iterations, dtype=np.int64)
    ks = np.zeros(cfg.num_scales, dtype=np.int64)
    if cfg.num_scales > 1:
        cap = min(cfg.intermediate_cap, cfg.total_iterations)
        ks[:-1] = rng.integers(0, cap + 1, size=cfg.num_scales - 1)
    ks[-1] = max(cfg.total_iterations - int(ks[:-1].sum()), 0)
    return ks


def _invert_batch(classifier: M.Classifier, labels: np.ndarray, inits: np.ndarray,
                  schedules: np.ndarray, cfg: InversionConfig) -> np.ndarray:
    """Run Algorithm-style multi-scale descent for a batch of trials.

    inits: [N,C,H,W] noise at native resolution; schedules: [N, num_scales].
    Returns final native-resolution images in [0,1].
    """
    n, c, h, w = inits.shape
    ladder = cfg.resolutions(h, w)
    z_max = inits
    with T.no_grad():
        z_min = T.resample_bilinear(Tensor(z_max), *ladder[0]).data
    z = z_max.copy()
    for si, (rh, rw) in enumerate(ladder):
        with T.no_grad():
            z = T.resample_bilinear(Tensor(z), rh, rw).data
            rho = compute_resampling_residual(Tensor(z_max), Tensor(z_min), (rh, rw)).data
        z = np.clip(z + rho, 0.0, 1.0)
        steps = schedules[:, si]
        for step in range(int(steps.max(initial=0))):
            active = np.flatnonzero(steps > step)
            if active.size == 0:
                break
            zt = Tensor(z[active], requires_grad=True)
            up = T.resample_bilinear(zt, h, w)
            loss = T.cross_entropy(M.forward(classifier, up), labels[active])
            loss.backward()
            z[active] = np.clip(z[active] - cfg.step_size * np.sign(zt.grad), 0.0, 1.0)
    return z


def _finalize(classifier, labels, images, trials) -> list:
    logits = []
    with T.no_grad():
        for lo in range(0, len(images), 256):
            logits.append(M.forward(classifier, Tensor(images[lo:lo + 256])).data)
    logits = np.concatenate(logits)
    logp = T.log_softmax(logits)
    out = []
    for i, y in enumerate(labels):
        out.append(MentalImage(
            pixels=images[i],
            label=int(y),
            trial=int(trials[i]),
            loss=float(-logp[i, y]),
            predicted=int(logits[i].argmax()),
        ))
    return out


def invert_class(classifier: M.Classifier, y: int, cfg: InversionConfig,
                 rng: np.random.Generator, trial: int = 0) -> MentalImage:
    """One mental image for class y; deterministic given the generator state."""
    c, h, w = classifier.config.input_shape
    if not 0 <= y < classifier.config.num_classes:
        raise InputError(f"class {y} out of range [0, {classifier.config.num_classes})")
    init = rng.uniform(0.0, 1.0, size=(1, c, h, w)).astype(np.float32)
    schedule = _draw_schedule(cfg, rng)[None, :]
    final = _invert_batch(classifier, np.array([y]), init, schedule, cfg)
    return _finalize(classifier, np.array([y]), final, [trial])[0]


def invert_all(classifier: M.Classifier, cfg: InversionConfig,
               rng: np.random.Generator | None = None, batch_size: int = 100) -> list:
    """images_per_class trials for every class, each on an independent seed
    stream spawned from the master generator; deterministic given the seed."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    c, h, w = classifier.config.input_shape
    classes = classifier.config.num_classes
    jobs = [(y, t) for y in range(classes) for t in range(cfg.images_per_class)]
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(jobs))
    inits = np.empty((len(jobs), c, h, w), dtype=np.float32)
    schedules = np.empty((len(jobs), cfg.num_scales), dtype=np.int64)
    for i, seed in enumerate(seeds):
        child = np.random.default_rng(int(seed))
        inits[i] = child.uniform(0.0, 1.0, size=(c, h, w))
        schedules[i] = _draw_schedule(cfg, child)
    labels = np.array([y for y, _ in jobs])
    trials = [t for _, t in jobs]
    finals = np.empty_like(inits)
    for lo in range(0, len(jobs), batch_size):
        hi = lo + batch_size
        finals[lo:hi] = _invert_batch(classifier, labels[lo:hi], inits[lo:hi], schedules[lo:hi], cfg)
    return _finalize(classifier, labels, finals, trials)
