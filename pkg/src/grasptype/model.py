"""The grasp model: per-type classifiers and configuration priors.

Training factorizes over grasp types, so every type's classifier and prior
is fitted from that type's samples alone. A dataset with a single type gives
the type-free model.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from grasptype.classifier import TypeClassifier, fit_classifier, predict_success
from grasptype.errors import FitError, GraspTypeError
from grasptype.gmm import GaussianComponent, GraspPrior, fit_prior
from grasptype.grasp import (
    ConfigurationBounds,
    GraspDataset,
    GraspType,
    assemble_input,
    order_type_names,
)
from grasptype.perception import PcaProjection

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
TYPE_FREE_NAME = "type-free"


@dataclass
class ModelConfig:
    n_components: int = 4
    l2_strength: float = 1e-4
    restarts: int = 5
    classifier_tol: float = 1e-6
    classifier_max_sweeps: int = 10000
    em_tol: float = 1e-8
    em_max_iter: int = 500
    covariance_floor: float = 1e-6
    prior_label_filter: str = "success"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        aliases = {"K": "n_components", "k": "n_components"}
        known = set(cls.__dataclass_fields__)
        kwargs = {}
        for key, value in doc.items():
            key = aliases.get(key, key)
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def type_rng(seed: int, type_name: str) -> np.random.Generator:
    """Per-type generator, so a type's fit does not depend on the other types."""
    return np.random.default_rng([int(seed), zlib.crc32(type_name.encode())])


@dataclass
class GraspModel:
    types: list
    classifiers: list
    priors: list
    bounds: ConfigurationBounds = field(default_factory=ConfigurationBounds.default)
    type_prior: Optional[np.ndarray] = None
    pca: Optional[PcaProjection] = field(default=None, compare=False)

    def __post_init__(self):
        if not (len(self.types) == len(self.classifiers) == len(self.priors)):
            raise ValueError("classifiers and priors must be indexed like the types")
        if self.type_prior is None:
            self.type_prior = np.full(len(self.types), 1.0 / len(self.types))
        self.type_prior = np.asarray(self.type_prior, dtype=float)
        if abs(self.type_prior.sum() - 1.0) > 1e-9:
            raise ValueError("type prior must sum to one")

    @property
    def n_types(self) -> int:
        return len(self.types)

    def grasp_type(self, key) -> GraspType:
        if isinstance(key, GraspType):
            return key
        if isinstance(key, (int, np.integer)):
            return self.types[int(key)]
        for t in self.types:
            if t.name == key:
                return t
        raise KeyError(f"model has no grasp type {key!r}")

    def classifier(self, key) -> TypeClassifier:
        return self.classifiers[self.grasp_type(key).index]

    def prior(self, key) -> GraspPrior:
        return self.priors[self.grasp_type(key).index]

    def success_probability(self, key, config, features) -> float:
        return predict_success(self.classifier(key), assemble_input(config, features))

    def to_json(self, include_pca: bool = True) -> dict:
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "types": [t.name for t in self.types],
            "type_prior": self.type_prior.tolist(),
            "bounds": self.bounds.to_json(),
            "classifiers": [
                {"type": t.name, "weights": c.weights.tolist()}
                for t, c in zip(self.types, self.classifiers)
            ],
            "priors": [
                {
                    "type": t.name,
                    "components": [
                        {"pi": c.weight, "mu": c.mean.tolist(), "sigma": c.covariance.reshape(-1).tolist()}
                        for c in p.components
                    ],
                }
                for t, p in zip(self.types, self.priors)
            ],
        }
        if include_pca and self.pca is not None:
            doc["pca"] = self.pca.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "GraspModel":
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        names = list(doc["types"])
        types = [GraspType(i, n) for i, n in enumerate(names)]
        by_type = {c["type"]: c for c in doc["classifiers"]}
        classifiers = [TypeClassifier(np.asarray(by_type[n]["weights"], float), n) for n in names]
        pri = {p["type"]: p for p in doc["priors"]}
        priors = []
        for n in names:
            comps = []
            for c in pri[n]["components"]:
                mu = np.asarray(c["mu"], float)
                sigma = np.asarray(c["sigma"], float).reshape(mu.size, mu.size)
                comps.append(GaussianComponent(float(c["pi"]), mu, sigma))
            priors.append(GraspPrior(comps, n))
        pca = PcaProjection.from_json(doc["pca"]) if "pca" in doc else None
        return cls(
            types=types,
            classifiers=classifiers,
            priors=priors,
            bounds=ConfigurationBounds.from_json(doc["bounds"]),
            type_prior=np.asarray(doc.get("type_prior", [1.0 / len(names)] * len(names))),
            pca=pca,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GraspModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fit_type(dataset: GraspDataset, type_name: str, config: ModelConfig):
    """Fit one type's classifier and prior; errors are tagged with the type."""
    try:
        clf = fit_classifier(
            dataset, type_name, config.l2_strength, config.classifier_tol, config.classifier_max_sweeps
        )
        prior = fit_prior(
            dataset,
            type_name,
            config.n_components,
            config.restarts,
            rng=type_rng(config.seed, type_name),
            label_filter=config.prior_label_filter,
            tol=config.em_tol,
            max_iter=config.em_max_iter,
            covariance_floor=config.covariance_floor,
        )
    except GraspTypeError as exc:
        raise FitError(type_name, exc) from exc
    if not clf.info.converged:
        logger.warning(
            "classifier %s hit the sweep cap (%d sweeps, |grad|=%.3g)",
            type_name, clf.info.sweeps, clf.info.gradient_norm,
        )
    return clf, prior


def fit_model(
    dataset: GraspDataset,
    config: Optional[ModelConfig] = None,
    bounds: Optional[ConfigurationBounds] = None,
    pca: Optional[PcaProjection] = None,
) -> GraspModel:
    config = config or ModelConfig()
    if len(dataset) == 0:
        raise GraspTypeError("cannot fit a model on an empty dataset")
    dataset = dataset.canonical()
    names = dataset.type_names
    classifiers, priors = [], []
    for name in names:
        clf, prior = fit_type(dataset, name, config)
        classifiers.append(clf)
        priors.append(prior)
    return GraspModel(
        types=[GraspType(i, n) for i, n in enumerate(names)],
        classifiers=classifiers,
        priors=priors,
        bounds=bounds or ConfigurationBounds.default(),
        pca=pca,
    )


def fit_type_free(dataset: GraspDataset, config=None, bounds=None, pca=None) -> GraspModel:
    """The single-type ablation: all samples share one classifier and one prior."""
    return fit_model(dataset.relabeled(TYPE_FREE_NAME), config, bounds, pca)


@dataclass
class ClassificationMetrics:
    n: int
    accuracy: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_predictions(cls, labels, predicted) -> "ClassificationMetrics":
        labels = np.asarray(labels, dtype=int)
        predicted = np.asarray(predicted, dtype=int)
        tp = int(np.sum((predicted == 1) & (labels == 1)))
        fp = int(np.sum((predicted == 1) & (labels == 0)))
        tn = int(np.sum((predicted == 0) & (labels == 0)))
        fn = int(np.sum((predicted == 0) & (labels == 1)))
        n = labels.size
        denom = 2 * tp + fp + fn
        return cls(
            n=n,
            accuracy=(tp + tn) / n if n else float("nan"),
            f1=2 * tp / denom if denom else 0.0,
            tp=tp, fp=fp, tn=tn, fn=fn,
        )


@dataclass
class LooReport:
    model: str
    per_type: dict
    overall: ClassificationMetrics
    probabilities: list = field(default_factory=list, repr=False)

    def rows(self) -> list:
        out = [{"model": self.model, "type": name, **asdict(m)} for name, m in self.per_type.items()]
        out.append({"model": self.model, "type": "all", **asdict(self.overall)})
        return out


def evaluate_loo(
    dataset: GraspDataset,
    config: Optional[ModelConfig] = None,
    type_free: bool = False,
    threshold: float = 0.5,
) -> LooReport:
    """Leave-one-out accuracy and F1 of the success classifiers.

    Only the classifier decides the held-out prediction, so the priors are
    not refitted per fold. Each fold warm-starts from the full-data weights;
    the penalized likelihood is strictly concave, so the optimum is the same.
    Metrics are grouped by the samples' recorded grasp type in both modes.
    """
    config = config or ModelConfig()
    dataset = dataset.canonical()
    if len(dataset) == 0:
        raise GraspTypeError("cannot evaluate an empty dataset")
    original_types = [s.type for s in dataset.samples]
    work = dataset.relabeled(TYPE_FREE_NAME) if type_free else dataset
    full = {}
    for name in work.type_names:
        try:
            full[name] = fit_classifier(
                work, name, config.l2_strength, config.classifier_tol, config.classifier_max_sweeps
            ).weights
        except GraspTypeError as exc:
            raise FitError(name, exc) from exc

    probs = []
    for i, sample in enumerate(work.samples):
        fold = work.without(i)
        try:
            clf = fit_classifier(
                fold, sample.type, config.l2_strength, config.classifier_tol,
                config.classifier_max_sweeps, init=full[sample.type],
            )
        except GraspTypeError as exc:
            raise FitError(sample.type, exc) from exc
        probs.append(predict_success(clf, assemble_input(sample.config, sample.features)))
    probs = np.asarray(probs)
    labels = np.array([s.label for s in work.samples])
    predicted = (probs >= threshold).astype(int)

    per_type = {}
    for name in order_type_names(original_types):
        mask = np.array([t == name for t in original_types])
        per_type[name] = ClassificationMetrics.from_predictions(labels[mask], predicted[mask])
    return LooReport(
        model=TYPE_FREE_NAME if type_free else "typed",
        per_type=per_type,
        overall=ClassificationMetrics.from_predictions(labels, predicted),
        probabilities=probs.tolist(),
    )
