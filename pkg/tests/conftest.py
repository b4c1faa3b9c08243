import math

import numpy as np
import pytest

from grasptype.gmm import GaussianComponent, GraspPrior
from grasptype.grasp import (
    CONFIG_DIM,
    FEATURE_DIM,
    ConfigurationBounds,
    GraspDataset,
    GraspType,
    TrainingSample,
    assemble_input,
)
from grasptype.classifier import TypeClassifier
from grasptype.model import GraspModel, ModelConfig, fit_model, fit_type_free
from grasptype.synthetic import build_paper_scale_dataset, default_oracle, random_objects

# filled by the acceptance module, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def train_build():
    objects = random_objects(10, 11, poses_per_object=2)
    return build_paper_scale_dataset(default_oracle(), objects, seed=3)


@pytest.fixture(scope="session")
def typed_model(train_build):
    return fit_model(train_build.dataset, ModelConfig(), pca=train_build.pca)


@pytest.fixture(scope="session")
def type_free_model(train_build):
    return fit_type_free(train_build.dataset, ModelConfig(), pca=train_build.pca)


def make_model(weights_by_type, priors_by_type, bounds=None):
    """A hand-built model; ``priors_by_type`` maps name -> list of (pi, mu, sigma)."""
    names = list(weights_by_type)
    classifiers = [TypeClassifier(np.asarray(weights_by_type[n], float), n) for n in names]
    priors = [
        GraspPrior([GaussianComponent(pi, np.asarray(mu, float), np.asarray(cov, float))
                    for pi, mu, cov in priors_by_type[n]], n)
        for n in names
    ]
    return GraspModel(
        types=[GraspType(i, n) for i, n in enumerate(names)],
        classifiers=classifiers,
        priors=priors,
        bounds=bounds or ConfigurationBounds.default(),
    )


def standard_prior(mu=None, scale=1.0):
    mu = np.zeros(CONFIG_DIM) if mu is None else np.asarray(mu, float)
    return [(1.0, mu, scale * np.eye(CONFIG_DIM))]


def random_in_bounds(bounds, n, rng):
    return rng.uniform(bounds.lower, bounds.upper, size=(n, CONFIG_DIM))


def planted_dataset(n=200, seed=0, margin=1.0, type_name="precision", noise_labels=False):
    """Samples whose labels come from a planted weight vector with a margin."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=CONFIG_DIM + FEATURE_DIM + 1)
    samples = []
    while len(samples) < n:
        theta = rng.normal(size=CONFIG_DIM)
        feats = rng.normal(size=FEATURE_DIM)
        s = w @ assemble_input(theta, feats)
        if noise_labels:
            label = int(rng.uniform() < 1 / (1 + math.exp(-s / 3)))
        elif abs(s) < margin:
            continue
        else:
            label = int(s > 0)
        samples.append(TrainingSample(theta, type_name, feats, label, f"{type_name}-{len(samples):04d}"))
    return GraspDataset(samples), w
