"""Read and write point clouds as ASCII PLY or plain x,y,z CSV."""

from __future__ import annotations

import os

import numpy as np

from grasptype.perception import PointCloud


def _fmt(v: float) -> str:
    return repr(float(v))


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: PLY has no vertex element")
        rows = [fh.readline().split() for _ in range(n_vertex)]
    data = np.asarray(rows, dtype=float).reshape(n_vertex, len(props))
    col = {name: i for i, name in enumerate(props)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = data[:, [col["red"], col["green"], col["blue"]]].astype(np.uint8)
    return PointCloud(points, colors)


def write_ply(path, cloud: PointCloud) -> None:
    has_color = cloud.colors is not None
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    lines = header
    for i, p in enumerate(cloud.points):
        row = " ".join(_fmt(v) for v in p)
        if has_color:
            row += " " + " ".join(str(int(c)) for c in cloud.colors[i])
        lines.append(row)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError:
                if rows:
                    raise
                continue  # header row
    return PointCloud(np.asarray(rows, dtype=float))


def write_csv(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,z\n")
        for p in cloud.points:
            fh.write(",".join(_fmt(v) for v in p) + "\n")


def read_cloud(path) -> PointCloud:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return read_ply(path)
    if ext in (".csv", ".txt", ".xyz"):
        return read_csv(path)
    raise ValueError(f"unsupported point cloud format: {path}")


def write_cloud(path, cloud: PointCloud) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        write_ply(path, cloud)
    elif ext in (".csv", ".txt", ".xyz"):
        write_csv(path, cloud)
    else:
        raise ValueError(f"unsupported point cloud format: {path}")
