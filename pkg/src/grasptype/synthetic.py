"""Desk-scale stand-ins for the robot: scenes, a success oracle, datasets, experiments."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import binomtest

from grasptype.errors import GraspTypeError, QuotaUnreachable
from grasptype.grasp import (
    CONFIG_DIM,
    ConfigurationBounds,
    GraspDataset,
    TrainingSample,
)
from grasptype.heuristic import (
    DEFAULT_FACES,
    NOMINAL_PRESHAPE,
    STANDOFF,
    compute_bounding_box,
    face_orientation,
    generate_heuristic_grasps,
    select_init,
)
from grasptype.inference import InferenceConfig, minimize_for_type, plan_grasp
from grasptype.model import ModelConfig, evaluate_loo
from grasptype.perception import (
    PointCloud,
    extract_features,
    fit_pca,
    perceive,
)

logger = logging.getLogger(__name__)

DEFAULT_CAMERA = (0.8, 0.0, 0.3)


@dataclass
class SyntheticObjectSpec:
    """A primitive resting on the z=0 table.

    ``dimensions``: box (lx, ly, lz); cylinder (radius, height);
    composite (lx, ly, lz, radius, height) for a cylinder standing on a box.
    ``pose``: (x, y, yaw) on the table.
    """

    shape: str = "box"
    dimensions: tuple = (0.12, 0.08, 0.05)
    pose: tuple = (0.0, 0.0, 0.0)
    point_density: float = 1e5
    noise_sigma: float = 0.0
    seed: int = 0
    camera_position: tuple = DEFAULT_CAMERA
    table_half_size: float = 0.2
    table_density: float = 2e4
    name: str = ""

    def __post_init__(self):
        if self.shape not in ("box", "cylinder", "composite"):
            raise ValueError(f"unknown shape {self.shape!r}")
        expected = {"box": 3, "cylinder": 2, "composite": 5}[self.shape]
        if len(self.dimensions) != expected or min(self.dimensions) <= 0:
            raise ValueError(f"{self.shape} needs {expected} positive dimensions")
        if self.point_density <= 0:
            raise ValueError("point density must be positive")
        self.dimensions = tuple(float(v) for v in self.dimensions)
        self.pose = tuple(float(v) for v in self.pose)
        self.camera_position = tuple(float(v) for v in self.camera_position)

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticObjectSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _count(area, density, rng):
    return int(rng.poisson(area * density))


def _box_surface(lx, ly, lz, z0, density, cam_local, rng, skip_top_disk=None):
    """Visible faces of an axis-aligned box with base at height z0."""
    hx, hy = lx / 2, ly / 2
    center = np.array([0.0, 0.0, z0 + lz / 2])
    half = np.array([hx, hy, lz / 2])
    chunks = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            if axis == 2 and sign < 0:
                continue  # resting face
            normal = np.zeros(3)
            normal[axis] = sign
            face_center = center + normal * half
            if normal @ (cam_local - face_center) <= 0:
                continue
            u, v = [a for a in range(3) if a != axis]
            n = _count(4 * half[u] * half[v], density, rng)
            pts = np.empty((n, 3))
            pts[:, axis] = face_center[axis]
            pts[:, u] = rng.uniform(-half[u], half[u], n) + center[u]
            pts[:, v] = rng.uniform(-half[v], half[v], n) + center[v]
            if axis == 2 and skip_top_disk is not None:
                pts = pts[np.hypot(pts[:, 0], pts[:, 1]) > skip_top_disk]
            chunks.append(pts)
    return chunks


def _cylinder_surface(radius, height, z0, density, cam_local, rng):
    chunks = []
    n = _count(2 * math.pi * radius * height, density, rng)
    phi = rng.uniform(0, 2 * math.pi, n)
    pts = np.column_stack([radius * np.cos(phi), radius * np.sin(phi), z0 + rng.uniform(0, height, n)])
    normals = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n)])
    visible = np.einsum("ij,ij->i", normals, cam_local - pts) > 0
    chunks.append(pts[visible])
    top = z0 + height
    if cam_local[2] > top:
        n = _count(math.pi * radius**2, density, rng)
        r = radius * np.sqrt(rng.uniform(0, 1, n))
        phi = rng.uniform(0, 2 * math.pi, n)
        chunks.append(np.column_stack([r * np.cos(phi), r * np.sin(phi), np.full(n, top)]))
    return chunks


def _footprint(spec: SyntheticObjectSpec, local_xy):
    d = spec.dimensions
    if spec.shape == "cylinder":
        return np.hypot(local_xy[:, 0], local_xy[:, 1]) <= d[0]
    return (np.abs(local_xy[:, 0]) <= d[0] / 2) & (np.abs(local_xy[:, 1]) <= d[1] / 2)


def generate_scene_parts(spec: SyntheticObjectSpec):
    """(table_points, object_points) of a single-view scene, in world coordinates."""
    rng = np.random.default_rng(spec.seed)
    x, y, yaw = spec.pose
    rot = _rot_z(yaw)
    offset = np.array([x, y, 0.0])
    cam_local = rot.T @ (np.asarray(spec.camera_position) - offset)
    d = spec.dimensions
    if spec.shape == "box":
        chunks = _box_surface(d[0], d[1], d[2], 0.0, spec.point_density, cam_local, rng)
    elif spec.shape == "cylinder":
        chunks = _cylinder_surface(d[0], d[1], 0.0, spec.point_density, cam_local, rng)
    else:
        chunks = _box_surface(d[0], d[1], d[2], 0.0, spec.point_density, cam_local, rng, skip_top_disk=d[3])
        chunks += _cylinder_surface(d[3], d[4], d[2], spec.point_density, cam_local, rng)
    obj_local = np.vstack(chunks) if chunks else np.empty((0, 3))
    obj = obj_local @ rot.T + offset

    half = spec.table_half_size
    n_table = _count((2 * half) ** 2, spec.table_density, rng)
    table = np.column_stack(
        [rng.uniform(-half, half, n_table) + x, rng.uniform(-half, half, n_table) + y, np.zeros(n_table)]
    )
    table_local = (table - offset) @ rot
    table = table[~_footprint(spec, table_local)]

    if spec.noise_sigma > 0:
        table = table + rng.normal(0.0, spec.noise_sigma, table.shape)
        obj = obj + rng.normal(0.0, spec.noise_sigma, obj.shape)
    return table, obj


def generate_scene(spec: SyntheticObjectSpec) -> PointCloud:
    table, obj = generate_scene_parts(spec)
    return PointCloud(np.vstack([table, obj]))


@dataclass
class OracleSpec:
    """Success iff the weighted distance to the type's target is within one.

    ``targets`` maps type name -> (mean 14-vector, radii 14-vector). Labels
    are drawn with P(success) = sigmoid(beta * (1 - d)); ``beta=inf`` makes
    them deterministic.
    """

    targets: dict
    beta: float = 20.0

    def __post_init__(self):
        clean = {}
        for name, (mean, radii) in self.targets.items():
            mean = np.asarray(mean, dtype=float).reshape(CONFIG_DIM)
            radii = np.asarray(radii, dtype=float).reshape(CONFIG_DIM)
            if np.any(radii <= 0):
                raise ValueError("oracle radii must be positive")
            clean[name] = (mean, radii)
        self.targets = clean

    def distance(self, config, type_name: str) -> float:
        mean, radii = self.targets[type_name]
        theta = np.asarray(getattr(config, "vector", config), dtype=float)
        return float(np.sqrt(np.sum(((theta - mean) / radii) ** 2)))

    def success_probability(self, config, type_name: str) -> float:
        d = self.distance(config, type_name)
        if math.isinf(self.beta):
            return 1.0 if d <= 1.0 else 0.0
        return float(expit(self.beta * (1.0 - d)))

    def to_dict(self) -> dict:
        return {
            "beta": "inf" if math.isinf(self.beta) else self.beta,
            "targets": {n: {"mean": m.tolist(), "radii": r.tolist()} for n, (m, r) in self.targets.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OracleSpec":
        targets = {n: (t["mean"], t["radii"]) for n, t in doc["targets"].items()}
        return cls(targets=targets, beta=float(doc.get("beta", 20.0)))


def oracle_label(oracle: OracleSpec, config, type_name: str, seed=None) -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = oracle.success_probability(config, type_name)
    u = rng.uniform()
    if math.isinf(oracle.beta):
        return int(p == 1.0)
    return int(u < p)


# Oracle regions share the face closest to the default camera (+x of the
# object frame) but differ in palm standoff and finger flexion, so the two
# types' target regions are disjoint.
REFERENCE_HALF_EXTENT_X = 0.085
_WIDE = 10.0


def default_oracle(beta: float = 20.0) -> OracleSpec:
    face = 0
    orientation = face_orientation(face)

    def target(standoff, flexion, position_radius, flexion_radius):
        mean = np.concatenate(
            [[REFERENCE_HALF_EXTENT_X + standoff, 0.0, 0.0], orientation, NOMINAL_PRESHAPE]
        )
        mean[[7, 9, 11, 13]] = flexion
        radii = np.full(CONFIG_DIM, _WIDE)
        radii[:3] = position_radius
        radii[3:6] = 0.5
        radii[[7, 9, 11, 13]] = flexion_radius
        return mean, radii

    return OracleSpec(
        targets={
            "precision": target(STANDOFF + 0.015, 0.25, 0.05, 0.25),
            "power": target(STANDOFF - 0.015, 1.0, 0.06, 0.3),
        },
        beta=beta,
    )


@dataclass
class CollectionSpec:
    """How heuristic training grasps are perturbed during data collection."""

    faces: tuple = DEFAULT_FACES
    noise_sigma: float = 0.02
    flexion_range: tuple = (0.0, 1.3)
    flexion_jitter: float = 0.05
    abduction_sigma: float = 0.1
    thumb_rotation_sigma: float = 0.1


def sample_collection_grasp(box, collection: CollectionSpec, camera, rng, bounds=None):
    face = int(rng.choice(collection.faces))
    preshape = NOMINAL_PRESHAPE.copy()
    flex = rng.uniform(*collection.flexion_range)
    preshape[[1, 3, 5, 7]] = flex + rng.normal(0.0, collection.flexion_jitter, 4)
    preshape[[0, 2, 4]] = rng.normal(0.0, collection.abduction_sigma, 3)
    preshape[6] += rng.normal(0.0, collection.thumb_rotation_sigma)
    return generate_heuristic_grasps(
        box, camera, collection.noise_sigma, 1, faces=(face,), preshape=preshape, bounds=bounds, rng=rng
    )[0]


@dataclass
class PerceivedObject:
    spec: SyntheticObjectSpec
    grid: object
    box: object


def perceive_object(spec: SyntheticObjectSpec, ransac_iters=200, inlier_threshold=0.005) -> PerceivedObject:
    cloud = generate_scene(spec)
    rng = np.random.default_rng([spec.seed, 7])
    obj, _, frame, grid = perceive(cloud, ransac_iters, inlier_threshold, rng=rng)
    return PerceivedObject(spec=spec, grid=grid, box=compute_bounding_box(obj, frame))


@dataclass
class DatasetBuild:
    dataset: GraspDataset
    pca: object
    attempts: dict
    object_index: list = field(repr=False, default_factory=list)


def build_paper_scale_dataset(
    oracle: OracleSpec,
    objects: Sequence[SyntheticObjectSpec],
    types: Sequence[str] = ("precision", "power"),
    successes: int = 20,
    failures: int = 40,
    seed: int = 0,
    collection: Optional[CollectionSpec] = None,
    attempt_factor: int = 100,
    latent_dim: int = 15,
    bounds: Optional[ConfigurationBounds] = None,
) -> DatasetBuild:
    """Rejection-sample labeled heuristic grasps until every per-type quota is met.

    Each type may use at most ``attempt_factor * (successes + failures)``
    attempts. Features come from the perception pipeline with a PCA fitted
    on the grids of all accepted samples.
    """
    collection = collection or CollectionSpec()
    perceived = [perceive_object(spec) for spec in objects]
    root = np.random.SeedSequence(seed)
    samples_raw = []
    attempts = {}
    cap = attempt_factor * max(1, successes + failures)
    for type_name, child in zip(types, root.spawn(len(types))):
        rng = np.random.default_rng(child)
        need = {1: successes, 0: failures}
        n = 0
        while need[0] > 0 or need[1] > 0:
            if n >= cap:
                raise QuotaUnreachable(
                    f"type {type_name!r}: quotas not met after {cap} attempts (missing {need})"
                )
            n += 1
            k = int(rng.integers(len(perceived)))
            obj = perceived[k]
            grasp = sample_collection_grasp(obj.box, collection, obj.spec.camera_position, rng, bounds)
            label = oracle_label(oracle, grasp.config, type_name, rng)
            if need[label] > 0:
                need[label] -= 1
                samples_raw.append((type_name, grasp.config.vector, label, k))
        attempts[type_name] = n
        logger.info("collected %s samples in %d attempts", type_name, n)

    grids = [perceived[k].grid for (_, _, _, k) in samples_raw]
    pca = fit_pca(grids, latent_dim)
    features = [extract_features(p.grid, pca).values for p in perceived]
    counters = {t: 0 for t in types}
    samples = []
    for type_name, theta, label, k in samples_raw:
        sid = f"{type_name}-{counters[type_name]:04d}"
        counters[type_name] += 1
        samples.append(TrainingSample(theta, type_name, features[k], label, sid))
    return DatasetBuild(
        dataset=GraspDataset(samples),
        pca=pca,
        attempts=attempts,
        object_index=[k for (_, _, _, k) in samples_raw],
    )


def random_objects(
    n: int,
    seed: int,
    shapes: Sequence[str] = ("box", "box", "composite"),
    poses_per_object: int = 1,
    point_density: float = 2e4,
    noise_sigma: float = 0.001,
    camera_position=DEFAULT_CAMERA,
) -> list:
    """Boxes and box-plus-cylinder composites with a few table poses each."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        shape = shapes[int(rng.integers(len(shapes)))]
        lx = rng.uniform(0.12, 0.15)
        ly = rng.uniform(0.06, 0.09)
        lz = rng.uniform(0.04, 0.06)
        if shape == "box":
            dims = (lx, ly, lz)
        elif shape == "cylinder":
            dims = (rng.uniform(0.03, 0.045), rng.uniform(0.05, 0.08))
        else:
            dims = (lx, ly, lz * 0.7, rng.uniform(0.015, 0.025), rng.uniform(0.02, 0.04))
        for j in range(poses_per_object):
            pose = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.3, 0.3))
            specs.append(
                SyntheticObjectSpec(
                    shape=shape,
                    dimensions=dims,
                    pose=pose,
                    point_density=point_density,
                    noise_sigma=noise_sigma,
                    seed=int(rng.integers(2**31)),
                    camera_position=tuple(camera_position),
                    name=f"obj{i:02d}",
                )
            )
    return specs


@dataclass
class PlanEvalReport:
    rows: list
    summary: list

    def success_rate(self, method: str, type_name: Optional[str] = None) -> float:
        vals = [r["success"] for r in self.rows if r["method"] == method and (type_name is None or r["type"] == type_name)]
        return float(np.mean(vals)) if vals else float("nan")

    def paired(self, method_a: str, method_b: str):
        """Success pairs (a, b) matched by trial and grasp type."""
        index = {(r["trial"], r["type"]): r["success"] for r in self.rows if r["method"] == method_b}
        return [
            (r["success"], index[(r["trial"], r["type"])])
            for r in self.rows
            if r["method"] == method_a and (r["trial"], r["type"]) in index
        ]


def paired_superiority(pairs, alpha: float = 0.05) -> dict:
    """Exact one-sided McNemar test that method a succeeds at least as often as b.

    Passes when a wins no fewer discordant pairs than b and either there are
    no discordant pairs or a's advantage is significant at ``alpha``.
    """
    a_only = sum(1 for a, b in pairs if a and not b)
    b_only = sum(1 for a, b in pairs if b and not a)
    discordant = a_only + b_only
    if discordant == 0:
        p_value = 1.0
        passed = True
    else:
        p_value = float(binomtest(a_only, discordant, 0.5, alternative="greater").pvalue)
        passed = a_only >= b_only and p_value < alpha
    return {
        "n_pairs": len(pairs),
        "a_only": a_only,
        "b_only": b_only,
        "p_value": p_value,
        "passed": passed,
    }


def _summarize(rows):
    summary = []
    keys = sorted({(r["method"], r["type"]) for r in rows})
    for method, type_name in keys:
        vals = [r["success"] for r in rows if r["method"] == method and r["type"] == type_name]
        summary.append(
            {"method": method, "type": type_name, "trials": len(vals), "successes": int(sum(vals)),
             "success_rate": float(np.mean(vals))}
        )
    return summary


def run_plan_eval(
    typed_model,
    type_free_model,
    oracle: OracleSpec,
    objects: Sequence[SyntheticObjectSpec],
    cfg: Optional[InferenceConfig] = None,
    seed: int = 0,
    noise_sigma: float = 0.02,
) -> PlanEvalReport:
    """Plan per type from the camera-closest heuristic grasp and score with the oracle.

    Methods: ``typed`` (one planned grasp per type), ``type-free`` (one grasp
    from the single-type model, executed as each type) and ``heuristic``
    (the initialization itself). All methods of a trial share the oracle's
    random draws.
    """
    cfg = cfg or InferenceConfig()
    rows = []
    seeds = np.random.SeedSequence(seed).spawn(len(objects))
    type_names = [t.name for t in typed_model.types]
    for trial, (spec, child) in enumerate(zip(objects, seeds)):
        rng = np.random.default_rng(child)
        obj = perceive_object(spec)
        feats = extract_features(obj.grid, typed_model.pca).values
        grasps = generate_heuristic_grasps(obj.box, spec.camera_position, noise_sigma, len(DEFAULT_FACES), rng=rng)
        init = select_init(grasps).config.vector
        label_seeds = {t: int(rng.integers(2**31)) for t in type_names}

        candidates = {"heuristic": {t: init for t in type_names}}
        typed = {}
        for t in type_names:
            typed[t] = minimize_for_type(typed_model, t, feats, init, cfg).theta
        candidates["typed"] = typed
        if type_free_model is not None:
            free_feats = extract_features(obj.grid, type_free_model.pca).values
            free = plan_grasp(type_free_model, free_feats, init, cfg).config
            candidates["type-free"] = {t: free for t in type_names}

        for method, per_type in candidates.items():
            for t in type_names:
                theta = per_type[t]
                rows.append(
                    {
                        "trial": trial,
                        "object": spec.name or f"obj{trial}",
                        "pose": list(spec.pose),
                        "method": method,
                        "type": t,
                        "success": oracle_label(oracle, theta, t, label_seeds[t]),
                        "oracle_probability": oracle.success_probability(theta, t),
                        "oracle_distance": oracle.distance(theta, t),
                        "theta": list(map(float, theta)),
                    }
                )
    return PlanEvalReport(rows=rows, summary=_summarize(rows))


def run_experiment(protocol: str, **kwargs):
    """Dispatch ``loo`` or ``plan-eval``.

    loo: dataset, config -> rows for the typed and type-free classifiers.
    plan-eval: keyword arguments of :func:`run_plan_eval`.
    """
    if protocol == "loo":
        dataset = kwargs["dataset"]
        config = kwargs.get("config") or ModelConfig()
        rows = []
        for type_free in (False, True):
            rows += evaluate_loo(dataset, config, type_free=type_free).rows()
        return rows
    if protocol == "plan-eval":
        return run_plan_eval(**kwargs)
    raise GraspTypeError(f"unknown protocol {protocol!r}")


@dataclass
class ProtocolRun:
    build: DatasetBuild
    typed_model: object
    type_free_model: object
    report: PlanEvalReport
    timings: dict


def run_full_protocol(
    seed: int = 0,
    train_objects: int = 10,
    train_poses: int = 2,
    test_objects: int = 25,
    test_poses: int = 4,
    oracle: Optional[OracleSpec] = None,
    model_config: Optional[ModelConfig] = None,
    cfg: Optional[InferenceConfig] = None,
    successes: int = 20,
    failures: int = 40,
    noise_sigma: float = 0.02,
) -> ProtocolRun:
    """Collect a labeled dataset, fit typed and type-free models, plan and score.

    Training and test objects are drawn from disjoint seed streams, so test
    scenes are novel to both models.
    """
    import time

    from grasptype.model import fit_model, fit_type_free

    oracle = oracle or default_oracle()
    model_config = model_config or ModelConfig(seed=seed)
    train_seed, test_seed, eval_seed = np.random.SeedSequence(seed).generate_state(3)
    timings = {}
    t0 = time.perf_counter()
    train = random_objects(train_objects, int(train_seed), poses_per_object=train_poses)
    build = build_paper_scale_dataset(oracle, train, successes=successes, failures=failures, seed=seed)
    timings["collect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    typed = fit_model(build.dataset, model_config, pca=build.pca)
    free = fit_type_free(build.dataset, model_config, pca=build.pca)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    test = random_objects(test_objects, int(test_seed), poses_per_object=test_poses)
    report = run_plan_eval(typed, free, oracle, test, cfg, seed=int(eval_seed), noise_sigma=noise_sigma)
    timings["plan_eval"] = time.perf_counter() - t0
    return ProtocolRun(build, typed, free, report, timings)
