"""Grasp configurations, bounds, grasp types and labeled datasets."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from grasptype.errors import GraspTypeError

CONFIG_DIM = 14
FEATURE_DIM = 15

# Preshape joint order: first two proximal joints of index, middle, ring, thumb.
JOINT_NAMES = (
    "index_0", "index_1", "middle_0", "middle_1",
    "ring_0", "ring_1", "thumb_0", "thumb_1",
)
CONFIG_NAMES = ("x", "y", "z", "roll", "pitch", "yaw") + JOINT_NAMES

# Allegro hand limits (radians) for the preshape joints.
_FINGER_LIMITS = ((-0.47, 0.47), (-0.196, 1.61))
_THUMB_LIMITS = ((0.263, 1.396), (-0.105, 1.163))
PALM_POSITION_LIMIT = 0.3

DEFAULT_TYPE_ORDER = ("precision", "power")


@dataclass(frozen=True)
class GraspType:
    index: int
    name: str


@dataclass
class GraspConfiguration:
    palm_position: np.ndarray
    palm_orientation: np.ndarray
    preshape_joints: np.ndarray

    def __post_init__(self):
        self.palm_position = np.asarray(self.palm_position, dtype=float).reshape(3)
        self.palm_orientation = np.asarray(self.palm_orientation, dtype=float).reshape(3)
        self.preshape_joints = np.asarray(self.preshape_joints, dtype=float).reshape(8)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.palm_position, self.palm_orientation, self.preshape_joints])

    @classmethod
    def from_vector(cls, theta) -> "GraspConfiguration":
        theta = np.asarray(theta, dtype=float).reshape(CONFIG_DIM)
        return cls(theta[:3], theta[3:6], theta[6:])


def as_theta(config) -> np.ndarray:
    if isinstance(config, GraspConfiguration):
        return config.vector
    theta = np.asarray(config, dtype=float)
    if theta.shape != (CONFIG_DIM,):
        raise ValueError(f"grasp configuration must have {CONFIG_DIM} entries, got {theta.shape}")
    return theta


@dataclass(frozen=True)
class ConfigurationBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(CONFIG_DIM)
        upper = np.asarray(self.upper, dtype=float).reshape(CONFIG_DIM)
        if np.any(lower > upper):
            raise ValueError("configuration bounds require lower <= upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def default(cls) -> "ConfigurationBounds":
        lim = PALM_POSITION_LIMIT
        lower = [-lim] * 3 + [-np.pi] * 3
        upper = [lim] * 3 + [np.pi] * 3
        for lo_hi in _FINGER_LIMITS * 3 + _THUMB_LIMITS:
            lower.append(lo_hi[0])
            upper.append(lo_hi[1])
        return cls(np.array(lower), np.array(upper))

    def contains(self, theta) -> bool:
        theta = as_theta(theta)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(as_theta(theta), self.lower, self.upper)

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_json(cls, doc) -> "ConfigurationBounds":
        return cls(np.asarray(doc["lower"], float), np.asarray(doc["upper"], float))


@dataclass
class TrainingSample:
    config: np.ndarray
    type: str
    features: np.ndarray
    label: Optional[int]
    sample_id: str

    def __post_init__(self):
        self.config = as_theta(self.config)
        self.features = np.asarray(self.features, dtype=float).reshape(-1)
        if self.label is not None:
            if self.label not in (0, 1, True, False):
                raise ValueError(f"label must be 0 or 1, got {self.label!r}")
            self.label = int(self.label)

    def to_json(self) -> dict:
        doc = {
            "sample_id": self.sample_id,
            "type": self.type,
            "theta": self.config.tolist(),
            "features": self.features.tolist(),
        }
        if self.label is not None:
            doc["label"] = self.label
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainingSample":
        return cls(
            config=np.asarray(doc["theta"], dtype=float),
            type=str(doc["type"]),
            features=np.asarray(doc["features"], dtype=float),
            label=doc.get("label"),
            sample_id=str(doc["sample_id"]),
        )


def order_type_names(names: Iterable[str]) -> list[str]:
    names = set(names)
    known = [n for n in DEFAULT_TYPE_ORDER if n in names]
    return known + sorted(names - set(known))


@dataclass
class GraspDataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def counts(self) -> dict:
        return dict(Counter((s.type, s.label) for s in self.samples))

    @property
    def type_names(self) -> list[str]:
        return order_type_names(s.type for s in self.samples)

    def canonical(self) -> "GraspDataset":
        """Samples sorted by id, which makes every fit independent of file order."""
        return GraspDataset(sorted(self.samples, key=lambda s: s.sample_id))

    def of_type(self, type_name: str) -> "GraspDataset":
        return GraspDataset([s for s in self.samples if s.type == type_name])

    def relabeled(self, type_name: str) -> "GraspDataset":
        return GraspDataset(
            [TrainingSample(s.config, type_name, s.features, s.label, s.sample_id) for s in self.samples]
        )

    def without(self, index: int) -> "GraspDataset":
        return GraspDataset(self.samples[:index] + self.samples[index + 1 :])

    def arrays(self):
        """(theta, features, labels) stacked as arrays."""
        theta = np.vstack([s.config for s in self.samples])
        feats = np.vstack([s.features for s in self.samples])
        labels = np.array([s.label for s in self.samples], dtype=float)
        return theta, feats, labels

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in self.samples:
                fh.write(json.dumps(s.to_json()) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "GraspDataset":
        samples = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    samples.append(TrainingSample.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetFormatError(path, lineno, exc) from exc
        return cls(samples)


class DatasetFormatError(GraspTypeError, ValueError):
    """A malformed dataset line; ``lineno`` is 1-based."""

    def __init__(self, path, lineno, cause):
        super().__init__(f"{path}:{lineno}: {cause}")
        self.path = str(path)
        self.lineno = lineno


def stack_inputs(theta: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Rows of [theta | features | 1]."""
    theta = np.atleast_2d(theta)
    features = np.atleast_2d(features)
    return np.hstack([theta, features, np.ones((theta.shape[0], 1))])


def assemble_input(config, features) -> np.ndarray:
    """Classifier input x = [theta (14) | o' (15) | 1]."""
    values = features.values if hasattr(features, "values") else features
    return np.concatenate([as_theta(config), np.asarray(values, dtype=float).reshape(-1), [1.0]])


def split_input(x: Sequence[float]):
    x = np.asarray(x, dtype=float)
    return x[:CONFIG_DIM], x[CONFIG_DIM:-1]
