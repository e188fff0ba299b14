"""Classifier training: plain minibatch SGD, optionally mixing in
projected-gradient adversarial examples.

The adversarial step follows raw gradient ascent (no sign), with each
instance's step count drawn uniformly from {0..T_max}:

    x <- proj_eps(x + alpha * grad_x L(y, f(x)))

where proj_eps clamps into the L-inf ball around the clean input and then
into the pixel range [0,1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models as M
from . import tensor as T
from .data import stack
from .errors import ConfigError, NumericError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    mode: str = "std"  # "std" | "adv"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.mode not in ("std", "adv"):
            raise ConfigError(f"mode must be 'std' or 'adv', got {self.mode!r}")


@dataclass(frozen=True)
class AdvConfig:
    alpha: float = 0.02
    epsilon: float = 0.1
    t_max: int = 10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.t_max < 0:
            raise ConfigError(f"t_max must be >= 0, got {self.t_max}")


def perturb_adversarial(classifier: M.Classifier, x: np.ndarray, y: np.ndarray,
                        adv: AdvConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-instance PGD ascent on the classification loss; stays inside the
    epsilon ball around x and inside [0,1]."""
    x = np.asarray(x)
    steps = rng.integers(0, adv.t_max + 1, size=len(x))
    adv_x = x.copy()
    for t in range(1, adv.t_max + 1):
        active = steps >= t
        if not active.any():
            break
        xa = Tensor(adv_x[active], requires_grad=True)
        # scale the mean loss back to a sum so per-instance gradients are unscaled
        loss = T.cross_entropy(M.forward(classifier, xa), y[active]) * float(active.sum())
        loss.backward()
        stepped = Tensor(adv_x[active] + adv.alpha * xa.grad)
        adv_x[active] = T.project_linf(stepped, Tensor(x[active]), adv.epsilon).data
    if np.max(np.abs(adv_x - x), initial=0.0) > adv.epsilon + 1e-6:
        raise NumericError("adversarial perturbation left the epsilon ball")
    return adv_x


def train(classifier: M.Classifier, samples: list, cfg: TrainConfig,
          adv: AdvConfig | None = None) -> M.Classifier:
    """SGD over the sample list; deterministic given (seed, config, data).

    Per-epoch records {epoch, split, loss, accuracy} are appended to
    ``classifier.history`` and written to the module logger.
    """
    if not samples:
        raise ConfigError("training data is empty")
    if cfg.mode == "adv" and adv is None:
        raise ConfigError("mode 'adv' requires an AdvConfig")
    images, labels = stack(samples)
    if classifier.dtype == np.float64:
        images = images.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    params = classifier.parameters()
    history = getattr(classifier, "history", [])
    classifier.history = history
    classifier.training = True
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(images))
            losses, hits, seen = [], 0, 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                xb, yb = images[idx], labels[idx]
                if cfg.mode == "adv":
                    xb = perturb_adversarial(classifier, xb, yb, adv, rng)
                batch = Tensor(xb)
                try:
                    logits = M.forward(classifier, batch)
                    loss = T.cross_entropy(logits, yb)
                    loss.backward()
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}: {exc}") from None
                for p in params:
                    p.data -= cfg.learning_rate * p.grad
                losses.append(loss.item())
                hits += int((logits.data.argmax(axis=1) == yb).sum())
                seen += len(idx)
            record = {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(losses)),
                "accuracy": hits / seen,
            }
            history.append(record)
            log.info("epoch=%d split=%s loss=%.4f accuracy=%.4f",
                     record["epoch"], record["split"], record["loss"], record["accuracy"])
    finally:
        classifier.training = False
    return classifier
