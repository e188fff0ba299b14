"""Shared session fixtures: one synthetic dataset and one clean/infected
model pair, reused by the inversion, analysis, unlearning, and metric tests."""

import numpy as np
import pytest

from triggerscope import data as D
from triggerscope import models as M
from triggerscope import training as TR


@pytest.fixture(scope="session")
def splits():
    samples = D.synthesize_dataset(100, 4000)
    return D.split_dataset(samples, D.SplitSpec(2000, 1000, 1000), np.random.default_rng(0))


@pytest.fixture(scope="session")
def trigger():
    return D.default_trigger()


@pytest.fixture(scope="session")
def infected_model(splits, trigger):
    poisoned = D.poison_dataset(splits.learn, trigger, 0.5, np.random.default_rng(1))
    clf = M.build_classifier(M.preset("vgg-small"), np.random.default_rng(2))
    return TR.train(clf, poisoned, TR.TrainConfig(epochs=5, seed=3))


@pytest.fixture(scope="session")
def clean_model(splits):
    clf = M.build_classifier(M.preset("vgg-small"), np.random.default_rng(2))
    return TR.train(clf, splits.learn, TR.TrainConfig(epochs=5, seed=3))


@pytest.fixture(scope="session")
def evidence_model(splits):
    from triggerscope import analysis as A

    return A.build_evidence_model(
        splits.auxiliary, M.preset("vgg-small"), seed=7,
        trigger=D.checkerboard_trigger(), cfg=A.AnalysisConfig())


@pytest.fixture(scope="session")
def mental_images(infected_model):
    from triggerscope import inversion as I

    return I.invert_all(infected_model, I.InversionConfig(), np.random.default_rng(11))


@pytest.fixture(scope="session")
def clean_mental_images(clean_model):
    from triggerscope import inversion as I

    return I.invert_all(clean_model, I.InversionConfig(), np.random.default_rng(11))
