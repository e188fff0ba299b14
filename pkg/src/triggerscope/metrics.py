"""Fidelity, vulnerability, and agreement metrics.

- accuracy: fraction of samples whose argmax prediction matches the label.
- attack_success_rate: fraction of trigger-stamped samples classified as the
  attack target, measured only over samples whose true label differs from
  the target (those cannot be "misclassified into" it).
- agreement: fraction of samples on which two classifiers predict alike.

Argmax ties break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TriggerSpec, apply_trigger, stack
from .errors import InputError
from .models import Classifier, predict


@dataclass(frozen=True)
class MetricsRecord:
    acc: float
    asr: float | None  # None when no trigger is known to measure against
    agreement: float | None  # None when there is no reference classifier
    acc_count: int
    asr_count: int = 0
    agreement_count: int = 0

    def __post_init__(self):
        for name in ("acc", "asr", "agreement"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InputError(f"{name} must be in [0,1], got {value}")
        if self.acc_count <= 0:
            raise InputError("accuracy denominator must be positive")


def accuracy(classifier: Classifier, data: list, batch_size: int = 512) -> float:
    if not data:
        raise InputError("cannot compute accuracy on an empty dataset")
    images, labels = stack(data)
    return float(np.mean(predict(classifier, images, batch_size) == labels))


def attack_success_rate(classifier: Classifier, data: list, trig: TriggerSpec,
                        batch_size: int = 512) -> float:
    victims = [s for s in data if s.label != trig.target_class]
    if not victims:
        raise InputError("every sample belongs to the attack target class")
    images, _ = stack(victims)
    stamped = np.stack([apply_trigger(img, trig) for img in images])
    preds = predict(classifier, stamped, batch_size)
    return float(np.mean(preds == trig.target_class))


def agreement(f_star: Classifier, f: Classifier, data: list, batch_size: int = 512) -> float:
    if not data:
        raise InputError("cannot compute agreement on an empty dataset")
    images, _ = stack(data)
    return float(np.mean(predict(f_star, images, batch_size) == predict(f, images, batch_size)))
