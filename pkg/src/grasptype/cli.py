"""Command line front end.

Every run writes exactly one manifest next to its outputs, recording the
command, the effective configuration, seeds, input/output hashes and
timestamps. Exit codes: 0 ok, 2 io, 3 data or fit, 4 inference.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli

from grasptype import __version__
from grasptype.cloud_io import read_cloud, write_cloud
from grasptype.errors import GraspTypeError, NonFiniteObjective
from grasptype.grasp import ConfigurationBounds, GraspDataset
from grasptype.heuristic import compute_bounding_box, generate_heuristic_grasps, select_init
from grasptype.inference import InferenceConfig, plan_grasp
from grasptype.model import GraspModel, ModelConfig, evaluate_loo, fit_model, fit_type_free
from grasptype.perception import (
    LATENT_DIM,
    PcaProjection,
    extract_features,
    fit_pca,
    perceive,
)
from grasptype.synthetic import (
    DEFAULT_CAMERA,
    OracleSpec,
    SyntheticObjectSpec,
    build_paper_scale_dataset,
    default_oracle,
    generate_scene,
    paired_superiority,
    random_objects,
    run_full_protocol,
    run_plan_eval,
)

logger = logging.getLogger("grasptype")

EXIT_OK, EXIT_IO, EXIT_DATA, EXIT_INFERENCE = 0, 2, 3, 4
FEATURES_FORMAT_VERSION = 1
MANIFEST_VERSION = 1
CLOUD_SUFFIXES = (".ply", ".csv")


class Run:
    """Collects what the manifest needs while a command executes."""

    def __init__(self, command, args, config):
        self.command = command
        self.args = args
        self.config = config
        self.seeds = {"root": int(args.seed)}
        self.inputs = []
        self.outputs = []
        self.out_dir = Path(args.out_dir)
        self.started = datetime.now(timezone.utc)
        self.extra = {}

    def input(self, path) -> Path:
        path = Path(path)
        self.inputs.append(path)
        return path

    def output(self, path, default_name) -> Path:
        path = Path(path) if path else self.out_dir / default_name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def manifest(self, status, error=None) -> dict:
        doc = {
            "version": MANIFEST_VERSION,
            "package_version": __version__,
            "command": self.command,
            "argv": list(self.args.argv),
            "status": status,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": [{"path": str(p), "sha256": sha256_of(p)} for p in self.inputs],
            "outputs": [{"path": str(p), "sha256": sha256_of(p)} for p in self.outputs],
            "started": self.started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        doc.update(self.extra)
        if error is not None:
            doc["error"] = error
        return doc


def sha256_of(path):
    path = Path(path)
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_csv_rows(path, rows) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    fields = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def flatten_row(row: dict) -> dict:
    """Expand list-valued fields into indexed columns for CSV."""
    out = {}
    for key, value in row.items():
        if key == "pose":
            out.update(zip(("pose_x", "pose_y", "pose_yaw"), value))
        elif isinstance(value, (list, tuple)):
            out.update({f"{key}_{i}": v for i, v in enumerate(value)})
        else:
            out[key] = value
    return out


# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        try:
            return tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise GraspTypeError(f"invalid TOML in {path}: {exc}") from exc


def model_config(config: dict, args) -> ModelConfig:
    doc = dict(config.get("model", {}))
    doc.setdefault("seed", args.seed)
    for flag, key in (("n_components", "n_components"), ("l2_strength", "l2_strength"),
                      ("prior_label_filter", "prior_label_filter")):
        value = getattr(args, flag, None)
        if value is not None:
            doc.pop("K", None)
            doc.pop("k", None)
            doc[key] = value
    return ModelConfig.from_dict(doc)


def inference_config(config: dict, args, bounds=None) -> InferenceConfig:
    doc = dict(config.get("inference", {}))
    if getattr(args, "prior_weight", None) is not None:
        doc["prior_weight"] = args.prior_weight
    return InferenceConfig(bounds=bounds, **doc)


def _inference_snapshot(cfg: InferenceConfig) -> dict:
    return {
        "prior_weight": cfg.prior_weight,
        "max_iterations": cfg.max_iterations,
        "gradient_tolerance": cfg.gradient_tolerance,
        "memory": cfg.memory,
        "restarts": cfg.restarts,
    }


def perception_options(config: dict) -> dict:
    doc = config.get("perception", {})
    return {
        "ransac_iters": int(doc.get("ransac_iters", 200)),
        "inlier_threshold": float(doc.get("inlier_threshold", 0.005)),
    }


def load_bounds(config: dict):
    doc = config.get("bounds")
    return ConfigurationBounds.from_json(doc) if doc else None


def load_model(path) -> GraspModel:
    try:
        return GraspModel.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise GraspTypeError(f"invalid model file {path}: {exc}") from exc


def load_pca(path) -> PcaProjection:
    try:
        return PcaProjection.from_json(read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraspTypeError(f"invalid PCA file {path}: {exc}") from exc


def load_grid(path, seed, options):
    """A voxel grid from a saved ``.npy`` occupancy array or a raw cloud."""
    path = Path(path)
    if path.suffix == ".npy":
        occupancy = np.load(path)
        if occupancy.size != 8000:
            raise GraspTypeError(f"{path}: expected 8000 voxels, got {occupancy.size}")
        return occupancy.reshape(20, 20, 20).astype(np.uint8)
    cloud = read_cloud(path)
    return perceive(cloud, rng=np.random.default_rng(seed), **options)[3]


# commands


def cmd_extract(args, run: Run) -> int:
    options = perception_options(run.config)
    cloud = read_cloud(run.input(args.cloud))
    obj, plane, frame, grid = perceive(cloud, rng=np.random.default_rng(args.seed), **options)
    box = compute_bounding_box(obj, frame)

    if args.fit_pca:
        files = sorted(p for p in Path(args.fit_pca).iterdir() if p.suffix in CLOUD_SUFFIXES + (".npy",))
        grids = [load_grid(run.input(p), args.seed, options) for p in files]
        pca = fit_pca(grids, args.latent_dim)
        write_json(run.output(args.pca_out, "pca.json"), pca.to_json())
    elif args.pca:
        pca = load_pca(run.input(args.pca))
    else:
        pca = None

    if args.grid_out:
        np.save(run.output(args.grid_out, "grid.npy"), grid.occupancy)

    doc = {
        "version": FEATURES_FORMAT_VERSION,
        "source_id": args.source_id or Path(args.cloud).stem,
        "latent_dim": pca.latent_dim if pca else 0,
        "values": extract_features(grid, pca).values.tolist() if pca else [],
        "object_points": len(obj),
        "dropped_count": int(grid.dropped_count),
        "plane": {"normal": plane.normal.tolist(), "offset": float(plane.offset)},
        "frame": {"origin": frame.origin.tolist(), "axes": frame.axes.tolist()},
        "half_extents": box.half_extents.tolist(),
    }
    write_json(run.output(args.out, "features.json"), doc)
    print(f"extracted {doc['latent_dim']} features from {len(obj)} object points")
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    dataset = GraspDataset.read_jsonl(run.input(args.dataset))
    if args.types:
        keep = set(args.types)
        dataset = GraspDataset([s for s in dataset.samples if s.type in keep])
        if len(dataset) == 0:
            raise GraspTypeError(f"no samples of types {sorted(keep)}")
    config = model_config(run.config, args)
    run.config["model"] = config.to_dict()
    run.seeds["model"] = config.seed
    pca = load_pca(run.input(args.pca)) if args.pca else None
    bounds = load_bounds(run.config)
    fit = fit_type_free if args.type_free else fit_model
    model = fit(dataset, config, bounds=bounds, pca=pca)
    model.save(run.output(args.out, "model.json"))

    diagnostics = []
    for t, clf, prior in zip(model.types, model.classifiers, model.priors):
        d = {
            "type": t.name,
            "samples": sum(1 for s in dataset.samples if args.type_free or s.type == t.name),
            "classifier_objective": clf.info.objective,
            "classifier_sweeps": clf.info.sweeps,
            "classifier_gradient_norm": clf.info.gradient_norm,
            "classifier_converged": clf.info.converged,
            "prior_log_likelihood": prior.info.log_likelihood,
            "prior_em_iterations": prior.info.iterations,
            "prior_components": prior.n_components,
        }
        diagnostics.append(d)
        print(
            f"{t.name}: classifier objective {d['classifier_objective']:.6g} after {d['classifier_sweeps']} sweeps "
            f"(|grad| {d['classifier_gradient_norm']:.2e}); prior log-likelihood "
            f"{d['prior_log_likelihood']:.6g} after {d['prior_em_iterations']} EM iterations"
        )
    run.extra["diagnostics"] = diagnostics
    return EXIT_OK


def cmd_plan(args, run: Run) -> int:
    model = load_model(run.input(args.model))
    pca = load_pca(run.input(args.pca)) if args.pca else model.pca
    if pca is None:
        raise GraspTypeError("model has no embedded PCA projection; pass --pca")
    cfg = inference_config(run.config, args)
    run.config["inference"] = _inference_snapshot(cfg)
    options = perception_options(run.config)
    cloud = read_cloud(run.input(args.cloud))
    rng = np.random.default_rng(args.seed)
    obj, _, frame, grid = perceive(cloud, rng=rng, **options)
    features = extract_features(grid, pca, Path(args.cloud).stem)
    box = compute_bounding_box(obj, frame)
    # camera distances are measured in the cloud's frame
    grasps = generate_heuristic_grasps(box, args.camera, args.noise_sigma, args.count, rng=rng, bounds=model.bounds)
    init = select_init(grasps)
    types = args.type or None
    result = plan_grasp(model, features, init.config.vector, cfg, types=types)

    doc = {"version": 1, **result.to_json()}
    doc["init"] = init.config.vector.tolist()
    doc["init_face"] = init.face_id
    doc["features"] = features.values.tolist()
    doc["frame"] = {"origin": frame.origin.tolist(), "axes": frame.axes.tolist()}
    write_json(run.output(args.out, "plan.json"), doc)
    print(
        f"planned {result.type} grasp: objective {result.objective_value:.6g}, "
        f"success probability {result.success_probability:.4f}"
    )
    return EXIT_OK


def _loo_rows(dataset, config, typed_only):
    rows = evaluate_loo(dataset, config).rows()
    if not typed_only:
        rows += evaluate_loo(dataset, config, type_free=True).rows()
    return rows


def _write_plan_eval(run: Run, args, report, prefix="plan_eval"):
    tests = {
        "typed_vs_type_free": paired_superiority(report.paired("typed", "type-free")),
        "typed_vs_heuristic": paired_superiority(report.paired("typed", "heuristic")),
    }
    write_csv_rows(run.output(None, f"{prefix}.csv"), [flatten_row(r) for r in report.rows])
    write_csv_rows(run.output(None, f"{prefix}_summary.csv"), report.summary)
    write_json(run.output(None, f"{prefix}.json"), {"summary": report.summary, "tests": tests, "rows": report.rows})
    print(f"{'method':<10} {'type':<10} {'trials':>6} {'success':>8}")
    for s in report.summary:
        print(f"{s['method']:<10} {s['type']:<10} {s['trials']:>6} {s['success_rate']:>8.3f}")
    for name, t in tests.items():
        print(f"{name}: {t['a_only']} vs {t['b_only']} discordant pairs, p={t['p_value']:.3g}")
    return tests


def cmd_eval(args, run: Run) -> int:
    config = model_config(run.config, args)
    run.config["model"] = config.to_dict()
    cfg = inference_config(run.config, args)
    run.config["inference"] = _inference_snapshot(cfg)
    synth = run.config.get("synthetic", {})
    if args.protocol == "loo":
        if not args.dataset:
            raise GraspTypeError("loo needs --dataset")
        dataset = GraspDataset.read_jsonl(run.input(args.dataset))
        rows = _loo_rows(dataset, config, args.typed_only)
        write_csv_rows(run.output(None, "loo.csv"), rows)
        write_json(run.output(None, "loo.json"), {"rows": rows})
        for r in rows:
            print(f"{r['model']:<10} {r['type']:<10} n={r['n']:<4} accuracy {r['accuracy']:.3f} F1 {r['f1']:.3f}")
        return EXIT_OK

    oracle = OracleSpec.from_dict(read_json(run.input(args.oracle))) if args.oracle else default_oracle()
    if args.protocol == "plan-eval":
        if not args.model:
            raise GraspTypeError("plan-eval needs --model")
        typed = load_model(run.input(args.model))
        free = load_model(run.input(args.type_free_model)) if args.type_free_model else None
        objects = random_objects(
            args.test_objects or synth.get("test_objects", 25),
            args.seed,
            poses_per_object=args.poses or synth.get("test_poses", 4),
        )
        run.seeds["objects"] = int(args.seed)
        report = run_plan_eval(typed, free, oracle, objects, cfg, seed=args.seed)
        _write_plan_eval(run, args, report)
        return EXIT_OK

    # full: the whole collect, train, plan and score protocol
    t0 = time.perf_counter()
    result = run_full_protocol(
        seed=args.seed,
        train_objects=synth.get("train_objects", 10),
        train_poses=synth.get("train_poses", 2),
        test_objects=args.test_objects or synth.get("test_objects", 25),
        test_poses=args.poses or synth.get("test_poses", 4),
        oracle=oracle,
        model_config=config,
        cfg=cfg,
        successes=synth.get("successes", 20),
        failures=synth.get("failures", 40),
    )
    result.build.dataset.write_jsonl(run.output(None, "dataset.jsonl"))
    result.typed_model.save(run.output(None, "model_typed.json"))
    result.type_free_model.save(run.output(None, "model_type_free.json"))
    tests = _write_plan_eval(run, args, result.report)
    run.extra["attempts"] = result.build.attempts
    run.extra["tests"] = tests
    logger.info("protocol finished in %.1f s (%s)", time.perf_counter() - t0, result.timings)
    return EXIT_OK


def _scene_spec(args, config) -> SyntheticObjectSpec:
    doc = dict(config.get("scene", {}))
    for flag, key in (("shape", "shape"), ("dims", "dimensions"), ("pose", "pose"), ("density", "point_density"),
                      ("noise", "noise_sigma"), ("camera", "camera_position")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    doc["seed"] = args.seed
    return SyntheticObjectSpec.from_dict(doc)


def cmd_gen_scene(args, run: Run) -> int:
    spec = _scene_spec(args, run.config)
    run.config["scene"] = spec.to_dict()
    cloud = generate_scene(spec)
    path = run.output(args.out, "scene.ply")
    write_cloud(path, cloud)
    print(f"wrote {len(cloud)} points to {path}")
    return EXIT_OK


def cmd_gen_dataset(args, run: Run) -> int:
    synth = dict(run.config.get("synthetic", {}))
    for key in ("objects", "poses", "successes", "failures", "attempt_factor", "beta"):
        value = getattr(args, key)
        if value is not None:
            synth[key] = value
    synth.setdefault("objects", 10)
    synth.setdefault("poses", 2)
    synth.setdefault("successes", 20)
    synth.setdefault("failures", 40)
    synth.setdefault("attempt_factor", 100)
    run.config["synthetic"] = synth
    oracle = OracleSpec.from_dict(read_json(run.input(args.oracle))) if args.oracle else default_oracle(
        float(synth.get("beta", 20.0))
    )
    objects = random_objects(int(synth["objects"]), args.seed, poses_per_object=int(synth["poses"]))
    build = build_paper_scale_dataset(
        oracle,
        objects,
        successes=int(synth["successes"]),
        failures=int(synth["failures"]),
        seed=args.seed,
        attempt_factor=int(synth["attempt_factor"]),
        latent_dim=args.latent_dim,
        bounds=load_bounds(run.config),
    )
    build.dataset.write_jsonl(run.output(args.out, "dataset.jsonl"))
    write_json(run.output(None, "pca.json"), build.pca.to_json())
    write_json(run.output(None, "oracle.json"), oracle.to_dict())
    write_json(run.output(None, "objects.json"), [o.to_dict() for o in objects])
    run.extra["attempts"] = build.attempts
    counts = {f"{t}/{y}": n for (t, y), n in sorted(build.dataset.counts.items())}
    run.extra["counts"] = counts
    print(f"collected {len(build.dataset)} samples {counts} in attempts {build.attempts}")
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grasptype", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="root seed for every random choice")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--out-dir", default=".", help="directory for outputs and the run manifest")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="segment a cloud and compute its visual features")
    p.add_argument("cloud", help="PLY or CSV point cloud")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pca", help="fitted PCA projection (JSON)")
    group.add_argument("--fit-pca", metavar="DIR", help="fit a projection on the clouds or .npy grids in DIR")
    p.add_argument("--pca-out", help="where to write a projection fitted with --fit-pca")
    p.add_argument("--latent-dim", type=int, default=LATENT_DIM)
    p.add_argument("--grid-out", help="also save the occupancy grid as .npy")
    p.add_argument("--source-id")
    p.add_argument("--out", help="features JSON (default OUT_DIR/features.json)")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("train", help="fit classifiers and priors from a JSONL dataset")
    p.add_argument("dataset")
    p.add_argument("--out", help="model JSON (default OUT_DIR/model.json)")
    p.add_argument("--types", nargs="+", help="only fit these grasp types")
    p.add_argument("--type-free", action="store_true", help="pool all types into one")
    p.add_argument("--pca", help="PCA projection to embed in the model")
    p.add_argument("-K", "--n-components", dest="n_components", type=int)
    p.add_argument("--l2-strength", type=float)
    p.add_argument("--prior-label-filter", choices=["success", "all"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("plan", help="plan a grasp for the object in a cloud")
    p.add_argument("model")
    p.add_argument("cloud")
    p.add_argument("--camera", type=float, nargs=3, default=list(DEFAULT_CAMERA), metavar=("X", "Y", "Z"))
    p.add_argument("--type", action="append", help="restrict planning to this type (repeatable)")
    p.add_argument("--prior-weight", type=float)
    p.add_argument("--noise-sigma", type=float, default=0.02, help="heuristic init position noise (m)")
    p.add_argument("--count", type=int, default=5, help="heuristic grasps to choose the init from")
    p.add_argument("--pca", help="PCA projection, if the model has none embedded")
    p.add_argument("--out", help="result JSON (default OUT_DIR/plan.json)")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("eval", help="run an evaluation protocol and write CSV and JSON reports")
    p.add_argument("protocol", choices=["loo", "plan-eval", "full"])
    p.add_argument("--dataset", help="dataset for loo")
    p.add_argument("--typed-only", action="store_true", help="loo: skip the type-free rows")
    p.add_argument("--model", help="typed model for plan-eval")
    p.add_argument("--type-free-model", help="type-free model for plan-eval")
    p.add_argument("--oracle", help="oracle JSON (default: built-in oracle)")
    p.add_argument("--test-objects", type=int)
    p.add_argument("--poses", type=int, help="poses per test object")
    p.add_argument("--prior-weight", type=float)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gen-scene", help="write a synthetic single-view tabletop scene")
    p.add_argument("--shape", choices=["box", "cylinder", "composite"])
    p.add_argument("--dims", type=float, nargs="+", help="box: lx ly lz; cylinder: r h; composite: lx ly lz r h")
    p.add_argument("--pose", type=float, nargs=3, metavar=("X", "Y", "YAW"))
    p.add_argument("--density", type=float, help="object surface points per square meter")
    p.add_argument("--noise", type=float, help="Gaussian point noise (m)")
    p.add_argument("--camera", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--out", help="PLY or CSV path (default OUT_DIR/scene.ply)")
    p.set_defaults(handler=cmd_gen_scene)

    p = sub.add_parser("gen-dataset", help="collect an oracle-labeled training set")
    p.add_argument("--objects", type=int)
    p.add_argument("--poses", type=int)
    p.add_argument("--successes", type=int)
    p.add_argument("--failures", type=int)
    p.add_argument("--attempt-factor", type=int)
    p.add_argument("--beta", type=float, help="oracle label temperature")
    p.add_argument("--oracle", help="oracle JSON (default: built-in oracle)")
    p.add_argument("--latent-dim", type=int, default=LATENT_DIM)
    p.add_argument("--out", help="dataset JSONL (default OUT_DIR/dataset.jsonl)")
    p.set_defaults(handler=cmd_gen_dataset)
    return parser


def _error_payload(exc, kind) -> dict:
    payload = {"kind": kind, "error": type(exc).__name__, "message": str(exc)}
    for attr, key in (("lineno", "line"), ("path", "path"), ("type_name", "grasp_type"), ("filename", "path")):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[key] = value
    return payload


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    code, error = EXIT_OK, None
    run = None
    try:
        config = load_config(args.config)
        run = Run(args.command, args, config)
        if args.config:
            run.input(args.config)
        code = args.handler(args, run)
    except OSError as exc:
        code, error = EXIT_IO, _error_payload(exc, "io")
    except NonFiniteObjective as exc:
        code, error = EXIT_INFERENCE, _error_payload(exc, "inference")
    except (GraspTypeError, ValueError, KeyError) as exc:
        code, error = EXIT_DATA, _error_payload(exc, getattr(exc, "kind", "data"))

    if error is not None:
        print(json.dumps({"error": error}), file=sys.stderr)
    if run is None:
        run = Run(args.command, args, {})
    try:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out_dir) / f"{args.command}.manifest.json",
                   run.manifest("ok" if code == EXIT_OK else "error", error))
    except OSError as exc:
        logger.error("could not write the run manifest: %s", exc)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
