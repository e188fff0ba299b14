"""Trigger unlearning: fine-tune an infected classifier on clean samples and
their pseudo-toxic twins, both labeled with the ground truth, to break the
trigger-to-target association without retraining from scratch.

Each batch draws one surviving hypothesis with probability inversely
proportional to its average loss (low loss = more trigger-like = sampled
more often), composes the batch with the hypothesis's pattern and mask, and
descends the summed objective

    L(y, f(x)) + L(y, f(x_tilde))

so the model keeps its clean behavior while learning that the suspected
trigger no longer implies the backdoor class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models as M
from . import tensor as T
from .data import stack
from .errors import ConfigError, InputError, NumericError
from .tensor import Tensor

_log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-8


@dataclass(frozen=True)
class UnlearnConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def sample_hypothesis(hypotheses: list, rng: np.random.Generator):
    """Draw one hypothesis with p(h) = (1/l_h) / sum(1/l_j); zero losses are
    floored at 1e-8 so a perfectly-scoring hypothesis dominates but never
    degenerates the distribution."""
    if not hypotheses:
        raise InputError("cannot sample from an empty hypothesis set")
    losses = np.array([h.loss for h in hypotheses], dtype=np.float64)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise InputError("hypothesis losses must be finite and nonnegative")
    weights = 1.0 / np.maximum(losses, LOSS_FLOOR)
    return hypotheses[int(rng.choice(len(hypotheses), p=weights / weights.sum()))]


def unlearn(classifier: M.Classifier, samples: list, hypotheses: list,
            cfg: UnlearnConfig, monitor=None) -> M.Classifier:
    """Fine-tune in place over cfg.epochs; one fresh hypothesis per batch.

    ``monitor``, when given, is called with the classifier after every epoch
    and should return a dict of metric values to log (e.g. ACC/ASR).
    """
    if not hypotheses:
        raise InputError("unlearning requires at least one hypothesis")
    if not samples:
        raise InputError("unlearning set is empty")
    x_all, y_all = stack(samples)
    x_all = x_all.astype(classifier.dtype, copy=False)
    truth = np.array([s.label for s in samples], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    params = classifier.parameters()
    history = getattr(classifier, "history", [])
    classifier.history = history
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            chosen = sample_hypothesis(hypotheses, rng)
            mask = chosen.mask.tensor.astype(x_all.dtype)
            pattern = (chosen.image.pixels.astype(x_all.dtype) * mask)
            xb = x_all[idx]
            composed = xb * (1.0 - mask) + pattern
            yb = y_all[idx]
            assert np.array_equal(yb, truth[idx]), "labels must stay ground truth"
            try:
                clean_loss = T.cross_entropy(M.forward(classifier, Tensor(xb)), yb)
                toxic_loss = T.cross_entropy(M.forward(classifier, Tensor(composed)), yb)
                loss = clean_loss + toxic_loss
                loss.backward()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from None
            for p in params:
                p.data -= cfg.learning_rate * p.grad
            epoch_loss += float(loss.data) * len(idx)
        record = {"epoch": epoch, "split": "unlearn", "loss": epoch_loss / n}
        if monitor is not None:
            record.update(monitor(classifier))
        history.append(record)
        _log.info("unlearn %s", " ".join(f"{k}={v}" for k, v in record.items()))
    return classifier
