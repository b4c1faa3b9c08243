"""Geometry-based heuristic grasps from an object's bounding box.

Used both to collect training grasps and to initialize inference. The palm
is placed ``standoff`` meters off a box face center, facing that center.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from grasptype.errors import EmptyList
from grasptype.grasp import ConfigurationBounds, GraspConfiguration, TrainingSample
from grasptype.perception import ObjectFrame, PointCloud

STANDOFF = 0.06
MIN_HALF_EXTENT = 1e-6

# Face ids in tie-break order; the bottom face (id 5) rests on the table.
FACE_NORMALS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)
DEFAULT_FACES = (0, 1, 2, 3, 4)

# Open hand: no abduction, light flexion; thumb rotated in front of the palm.
NOMINAL_PRESHAPE = np.array([0.0, 0.6, 0.0, 0.6, 0.0, 0.6, 1.0, 0.6])


@dataclass(frozen=True)
class BoundingBox:
    frame: ObjectFrame
    half_extents: np.ndarray

    def face_center(self, face_id: int) -> np.ndarray:
        return FACE_NORMALS[face_id] * self.half_extents


@dataclass
class HeuristicGrasp:
    config: GraspConfiguration
    face_id: int
    camera_distance: float


def compute_bounding_box(object_cloud: PointCloud, frame: ObjectFrame) -> BoundingBox:
    local = frame.to_local(object_cloud.points)
    half = np.max(np.abs(local), axis=0)
    return BoundingBox(frame=frame, half_extents=np.maximum(half, MIN_HALF_EXTENT))


def wrap_angles(angles) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(angles, dtype=float) + np.pi, 2 * np.pi) - np.pi
    out[np.isclose(out, -np.pi, rtol=0, atol=1e-12)] = np.pi
    return out


def palm_rotation(face_normal: np.ndarray) -> np.ndarray:
    """Palm frame for approaching a face; columns are the palm x, y, z axes.

    Palm z points at the face center; palm y is the object's third axis,
    or its first axis when the approach is along the third axis.
    """
    z = -np.asarray(face_normal, dtype=float)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 1 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    y = up - (up @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


def face_orientation(face_id: int) -> np.ndarray:
    """Extrinsic roll-pitch-yaw of the palm facing ``face_id``."""
    rpy = Rotation.from_matrix(palm_rotation(FACE_NORMALS[face_id])).as_euler("xyz")
    return wrap_angles(rpy)


def generate_heuristic_grasps(
    box: BoundingBox,
    camera_position,
    noise_sigma: float = 0.02,
    count: int = 5,
    seed=None,
    faces: Sequence[int] = DEFAULT_FACES,
    preshape=NOMINAL_PRESHAPE,
    standoff: float = STANDOFF,
    bounds: Optional[ConfigurationBounds] = None,
    rng: Optional[np.random.Generator] = None,
) -> list:
    """Grasps cycling over ``faces``, palm ``standoff`` off each face center.

    Palm positions get isotropic Gaussian noise. Configurations are clamped
    into ``bounds`` (default joint limits).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    bounds = bounds or ConfigurationBounds.default()
    camera = np.asarray(camera_position, dtype=float)
    grasps = []
    for i in range(count):
        face = faces[i % len(faces)]
        normal = FACE_NORMALS[face]
        position = box.face_center(face) + standoff * normal
        position = position + rng.normal(0.0, noise_sigma, size=3) if noise_sigma > 0 else position
        theta = np.concatenate([position, face_orientation(face), np.asarray(preshape, float)])
        theta = bounds.clip(theta)
        world = box.frame.to_world(theta[:3])
        grasps.append(
            HeuristicGrasp(
                config=GraspConfiguration.from_vector(theta),
                face_id=int(face),
                camera_distance=float(np.linalg.norm(world - camera)),
            )
        )
    return grasps


def select_init(grasps: Sequence[HeuristicGrasp]) -> HeuristicGrasp:
    """The grasp closest to the camera; ties go to the lower face id."""
    if not grasps:
        raise EmptyList("no heuristic grasps to choose from")
    return min(grasps, key=lambda g: (g.camera_distance, g.face_id))


def grasps_to_samples(grasps, type_name: str, features, prefix: str = "heuristic") -> list:
    """Unlabeled samples in the dataset line schema."""
    values = features.values if hasattr(features, "values") else features
    return [
        TrainingSample(g.config.vector, type_name, values, None, f"{prefix}-{i:05d}")
        for i, g in enumerate(grasps)
    ]
