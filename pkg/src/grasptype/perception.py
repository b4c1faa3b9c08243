"""Object perception: table segmentation, object frame, voxel grid, PCA features.

A raw tabletop cloud goes through four stages::

    cloud -> segment_object -> estimate_object_frame -> voxelize -> extract_features

``fit_pca`` learns the projection used by the last stage from a set of
training grids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from grasptype.errors import (
    DegenerateGeometry,
    DegeneratePlane,
    EmptySegmentation,
    InsufficientData,
)

logger = logging.getLogger(__name__)

GRID_DIM = 20
VOXEL_SIZE = 0.01
GRID_HALF_EXTENT = GRID_DIM * VOXEL_SIZE / 2.0
N_VOXELS = GRID_DIM**3
LATENT_DIM = 15

PCA_FORMAT_VERSION = 1

# Sign references for the principal axes; later entries break ties.
_FIRST_AXIS_REFS = (np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0]))
_SECOND_AXIS_REFS = (np.array([0, 1.0, 0]), np.array([0, 0, 1.0]), np.array([1.0, 0, 0]))
_SIGN_TIE_EPS = 1e-12


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, mask) -> "PointCloud":
        colors = None if self.colors is None else self.colors[mask]
        return PointCloud(self.points[mask], colors)


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_threshold: float

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return points @ self.normal + self.offset


@dataclass(frozen=True)
class ObjectFrame:
    origin: np.ndarray
    axes: np.ndarray  # columns are first, second, third axis

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.axes

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local, dtype=float) @ self.axes.T + self.origin


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray
    frame: ObjectFrame
    voxel_size: float = VOXEL_SIZE
    dropped_count: int = 0

    def flatten(self) -> np.ndarray:
        return self.occupancy.reshape(-1).astype(float)


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray  # (latent_dim, n_voxels), rows are principal directions
    explained_variance: np.ndarray = field(default=None, compare=False)

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    def to_json(self) -> dict:
        return {
            "version": PCA_FORMAT_VERSION,
            "latent_dim": self.latent_dim,
            "mean": self.mean.tolist(),
            "basis": self.basis.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PcaProjection":
        if doc.get("version") != PCA_FORMAT_VERSION:
            raise ValueError(f"unsupported PCA document version {doc.get('version')!r}")
        basis = np.asarray(doc["basis"], dtype=float).reshape(int(doc["latent_dim"]), -1)
        return cls(mean=np.asarray(doc["mean"], dtype=float), basis=basis)


@dataclass(frozen=True)
class VisualFeatures:
    values: np.ndarray
    source_id: str = ""

    def to_json(self) -> dict:
        return {"source_id": self.source_id, "values": self.values.tolist()}


def _plane_hypotheses(points, rng, iterations):
    n = points.shape[0]
    idx = np.stack([rng.choice(n, size=3, replace=False) for _ in range(iterations)])
    p0, p1, p2 = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.maximum(
        np.linalg.norm(p1 - p0, axis=1) * np.linalg.norm(p2 - p0, axis=1), 1e-300
    )
    valid = norms > 1e-12 * scale
    normals[valid] /= norms[valid, None]
    offsets = -np.einsum("ij,ij->i", normals, p0)
    return normals, offsets, valid


def segment_object(
    cloud: PointCloud,
    ransac_iters: int = 200,
    inlier_threshold: float = 0.005,
    up=(0.0, 0.0, 1.0),
    rng: Optional[np.random.Generator] = None,
) -> tuple[PointCloud, PlaneModel]:
    """Fit the table plane with RANSAC and keep the points above it.

    The plane normal is oriented to have a non-negative component along
    ``up``. Among hypotheses with equal inlier counts the one whose normal is
    best aligned with ``up`` wins. Returned points have signed distance
    strictly greater than ``inlier_threshold``.
    """
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")
    points = cloud.points
    if points.shape[0] < 3:
        raise DegeneratePlane("need at least 3 points to fit a plane")
    rng = np.random.default_rng(0) if rng is None else rng
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)

    normals, offsets, valid = _plane_hypotheses(points, rng, ransac_iters)
    if not valid.any():
        raise DegeneratePlane("all sampled point triples are collinear")
    normals, offsets = normals[valid], offsets[valid]
    flip = normals @ up < 0
    normals[flip] *= -1
    offsets[flip] *= -1

    counts = np.empty(normals.shape[0], dtype=np.int64)
    for start in range(0, normals.shape[0], 64):
        dist = np.abs(points @ normals[start : start + 64].T + offsets[start : start + 64])
        counts[start : start + 64] = (dist <= inlier_threshold).sum(axis=0)
    alignment = normals @ up
    best = np.lexsort((-alignment, -counts))[0]
    if counts[best] < 3:
        raise DegeneratePlane(f"best plane has only {counts[best]} inliers")

    plane = PlaneModel(
        normal=normals[best], offset=float(offsets[best]), inlier_threshold=inlier_threshold
    )
    above = plane.signed_distance(points) > inlier_threshold
    if not above.any():
        raise EmptySegmentation("no points above the table plane")
    logger.debug(
        "plane inliers=%d above=%d of %d", counts[best], int(above.sum()), points.shape[0]
    )
    return cloud.subset(above), plane


def _orient(axis, refs):
    for ref in refs:
        d = float(axis @ ref)
        if abs(d) > _SIGN_TIE_EPS:
            return axis if d > 0 else -axis
    return axis


def estimate_object_frame(object_cloud: PointCloud) -> ObjectFrame:
    """Right-handed frame at the centroid from the two leading principal axes.

    Signs are made deterministic: the first axis points along +x, the second
    along +y, with +z (then the remaining world axis) breaking exact ties.
    """
    points = object_cloud.points
    if points.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 points for an object frame")
    origin = points.mean(axis=0)
    centered = points - origin
    cov = centered.T @ centered / points.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0 or evals[1] / evals[0] < 1e-9:
        raise DegenerateGeometry("point covariance has rank < 2")
    first = _orient(evecs[:, 0], _FIRST_AXIS_REFS)
    second = _orient(evecs[:, 1], _SECOND_AXIS_REFS)
    # re-orthonormalize to keep R^T R = I at machine precision
    first = first / np.linalg.norm(first)
    second = second - (second @ first) * first
    second = second / np.linalg.norm(second)
    third = np.cross(first, second)
    return ObjectFrame(origin=origin, axes=np.column_stack([first, second, third]))


def voxelize(object_cloud: PointCloud, frame: ObjectFrame) -> VoxelGrid:
    local = frame.to_local(object_cloud.points)
    idx = np.floor((local + GRID_HALF_EXTENT) / VOXEL_SIZE).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < GRID_DIM), axis=1)
    occupancy = np.zeros((GRID_DIM,) * 3, dtype=np.uint8)
    kept = idx[inside]
    occupancy[kept[:, 0], kept[:, 1], kept[:, 2]] = 1
    dropped = int((~inside).sum())
    if dropped:
        logger.debug("voxelize dropped %d points outside the grid", dropped)
    return VoxelGrid(occupancy=occupancy, frame=frame, dropped_count=dropped)


def _as_matrix(grids) -> np.ndarray:
    rows = [g.flatten() if isinstance(g, VoxelGrid) else np.asarray(g, float).reshape(-1) for g in grids]
    return np.vstack(rows)


def fit_pca(training_grids: Sequence, latent_dim: int = LATENT_DIM) -> PcaProjection:
    """Fit the occupancy PCA.

    ``training_grids`` may hold VoxelGrid objects or flat real vectors.
    Basis rows are sign-normalized so that their largest-magnitude entry is
    positive.
    """
    if len(training_grids) < latent_dim + 1:
        raise InsufficientData(
            f"PCA with latent_dim={latent_dim} needs >= {latent_dim + 1} grids, got {len(training_grids)}"
        )
    data = _as_matrix(training_grids)
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:latent_dim]
    if basis.shape[0] < latent_dim:
        raise InsufficientData("fewer samples than requested latent dimensions")
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(latent_dim), pivots])
    basis = basis * signs[:, None]
    variance = s[:latent_dim] ** 2 / data.shape[0]
    return PcaProjection(mean=mean, basis=np.ascontiguousarray(basis), explained_variance=variance)


def project(values: np.ndarray, proj: PcaProjection) -> np.ndarray:
    return proj.basis @ (np.asarray(values, dtype=float) - proj.mean)


def reconstruct(latent: np.ndarray, proj: PcaProjection) -> np.ndarray:
    return proj.basis.T @ latent + proj.mean


def extract_features(grid, proj: PcaProjection, source_id: str = "") -> VisualFeatures:
    flat = grid.flatten() if isinstance(grid, VoxelGrid) else np.asarray(grid, float).reshape(-1)
    return VisualFeatures(values=project(flat, proj), source_id=source_id)


def perceive(
    cloud: PointCloud,
    ransac_iters: int = 200,
    inlier_threshold: float = 0.005,
    rng: Optional[np.random.Generator] = None,
):
    """Run segmentation, frame estimation and voxelization on a raw cloud."""
    obj, plane = segment_object(cloud, ransac_iters, inlier_threshold, rng=rng)
    frame = estimate_object_frame(obj)
    return obj, plane, frame, voxelize(obj, frame)
